"""Pseudo-label selection.

A sample predicted as class ``c`` is kept when its normalized uncertainty is
at most the uncertainty threshold (the global ``tau`` unless overridden) and
its confidence reaches the per-class threshold ``tau(c)``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StateError
from .uncertainty import McEstimates

UNCERTAINTY_METRICS = ("entropy", "std")
# Largest possible per-class population std of values in [0, 1].
_STD_CEILING = 0.5


@dataclass(frozen=True)
class GateConfig:
    uncertainty_metric: str = "entropy"
    per_class_unc_modulation: bool = False
    score_ranking: bool = False
    score_beta: float = 1.0
    score_keep_fraction: float = 0.5
    uncertainty_threshold: float = None  # fixed override of the uncertainty gate

    def __post_init__(self):
        if self.uncertainty_metric not in UNCERTAINTY_METRICS:
            raise ConfigError(f"uncertainty_metric must be one of {UNCERTAINTY_METRICS}")
        if not (math.isfinite(self.score_beta) and self.score_beta >= 0):
            raise ConfigError("score_beta must be finite and >= 0")
        if not 0 < self.score_keep_fraction <= 1:
            raise ConfigError("score_keep_fraction must lie in (0, 1]")
        if self.uncertainty_threshold is not None and not 0 <= self.uncertainty_threshold <= 1:
            raise ConfigError("uncertainty_threshold must lie in [0, 1]")


def normalized_uncertainty(entropy, std, class_count, metric="entropy"):
    """Map entropy (by ``ln C``) or std (by its 0.5 ceiling) onto [0, 1]."""
    if metric == "entropy":
        return min(entropy / math.log(class_count), 1.0)
    return min(std / _STD_CEILING, 1.0)


def normalized_array(est, metric="entropy"):
    """Vectorised :func:`normalized_uncertainty` over an :class:`McEstimates`."""
    if metric == "entropy":
        return np.minimum(est.entropy / math.log(est.class_count), 1.0)
    return np.minimum(est.std / _STD_CEILING, 1.0)


def _check_fresh(state):
    if state.class_tau is None or state.derived_epoch != state.epoch:
        raise StateError(f"thresholds derived for epoch {state.derived_epoch}, state is at epoch {state.epoch}")


def gate_components(est, state, cfg):
    """``(confidence_ok, uncertainty_ok)`` for a single estimate."""
    _check_fresh(state)
    c = est.predicted_class
    u = normalized_uncertainty(est.entropy, est.std, est.class_count, cfg.uncertainty_metric)
    tau_unc = state.global_tau if cfg.uncertainty_threshold is None else cfg.uncertainty_threshold
    if cfg.per_class_unc_modulation:
        tau_unc = tau_unc * state.class_unc_norm[c]
    return est.confidence >= state.class_tau[c], u <= tau_unc


def gate_sample(est, state, cfg):
    conf_ok, unc_ok = gate_components(est, state, cfg)
    return bool(conf_ok and unc_ok)


@dataclass
class SelectionOutcome:
    indices: np.ndarray
    pseudo_labels: np.ndarray
    gates: np.ndarray
    class_counts: np.ndarray
    class_mean_uncertainty: np.ndarray  # NaN where a class has no selected sample
    confidence_ok: np.ndarray
    uncertainty_ok: np.ndarray

    @property
    def n_selected(self):
        return len(self.indices)

    def rejection_reasons(self):
        """Counts of rejected samples failing only confidence, only uncertainty, or both."""
        rejected = ~self.gates
        conf_fail, unc_fail = ~self.confidence_ok, ~self.uncertainty_ok
        return {
            "failed_confidence": int(np.sum(rejected & conf_fail & ~unc_fail)),
            "failed_uncertainty": int(np.sum(rejected & unc_fail & ~conf_fail)),
            "failed_both": int(np.sum(rejected & conf_fail & unc_fail)),
            "ranked_out": int(np.sum(rejected & ~conf_fail & ~unc_fail)),
        }


def _outcome(gates, predicted, uncertainty, conf_ok, unc_ok, C):
    idx = np.flatnonzero(gates)
    labels = predicted[idx]
    counts = np.bincount(labels, minlength=C)
    sums = np.bincount(labels, weights=uncertainty[idx], minlength=C)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_unc = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return SelectionOutcome(idx, labels, gates, counts, mean_unc, conf_ok, unc_ok)


def _as_estimates(estimates):
    if isinstance(estimates, McEstimates):
        return estimates
    return McEstimates.from_estimates(list(estimates))


def select_batch(estimates, state, cfg):
    est = _as_estimates(estimates)
    if len(est) == 0:
        raise ConfigError("select_batch needs at least one estimate")
    _check_fresh(state)
    predicted = est.predicted_class
    u = normalized_array(est, cfg.uncertainty_metric)
    tau_unc = state.global_tau if cfg.uncertainty_threshold is None else cfg.uncertainty_threshold
    if cfg.per_class_unc_modulation:
        tau_unc = tau_unc * state.class_unc_norm[predicted]
    conf_ok = est.confidence >= state.class_tau[predicted]
    unc_ok = u <= tau_unc
    gates = conf_ok & unc_ok
    if cfg.score_ranking and gates.any():
        gates = _keep_top_scores(gates, est.confidence - cfg.score_beta * u, cfg.score_keep_fraction)
    return _outcome(gates, predicted, u, conf_ok, unc_ok, est.class_count)


def _keep_top_scores(gates, score, fraction):
    idx = np.flatnonzero(gates)
    keep = max(1, int(math.ceil(fraction * len(idx))))
    # ties resolved by score value only: the kept set is every sample scoring
    # at least the keep-th best, so it does not depend on input order
    cutoff = np.sort(score[idx])[::-1][keep - 1]
    out = np.zeros_like(gates)
    out[idx[score[idx] >= cutoff]] = True
    return out


def select_fixed(estimates, threshold, uncertainty_metric="entropy"):
    """Confidence-only selection at a fixed threshold (the FixMatch-style baseline)."""
    est = _as_estimates(estimates)
    conf_ok = est.confidence >= threshold
    u = normalized_array(est, uncertainty_metric)
    return _outcome(conf_ok.copy(), est.predicted_class, u, conf_ok, np.ones_like(conf_ok), est.class_count)


class TrainingView:
    """Labeled samples plus selected pseudo-labeled samples, by reference.

    Rows ``[0, n_labeled)`` come from the labeled set with their true labels,
    the remaining rows from the unlabeled pool with pseudo-labels. Features are
    gathered on demand from the source arrays.
    """

    def __init__(self, data, unlabeled_indices, pseudo_labels):
        self._data = data
        self.unlabeled_indices = np.asarray(unlabeled_indices, dtype=np.int64)
        n_lab = len(data.labeled_y)
        self.labels = np.concatenate([data.labeled_y, np.asarray(pseudo_labels, dtype=np.int64)])
        self.is_pseudo = np.zeros(len(self.labels), dtype=bool)
        self.is_pseudo[n_lab:] = True
        self.n_labeled = n_lab

    def __len__(self):
        return len(self.labels)

    @property
    def n_pseudo(self):
        return len(self.unlabeled_indices)

    def features(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        out = np.empty((len(rows), self._data.labeled_x.shape[1]))
        lab = rows < self.n_labeled
        out[lab] = self._data.labeled_x[rows[lab]]
        out[~lab] = self._data.unlabeled_x[self.unlabeled_indices[rows[~lab] - self.n_labeled]]
        return out

    def source_index(self, rows):
        """Index of each row within its own source split."""
        rows = np.asarray(rows, dtype=np.int64)
        out = rows.copy()
        pseudo = rows >= self.n_labeled
        out[pseudo] = self.unlabeled_indices[rows[pseudo] - self.n_labeled]
        return out


def merge_selected(data, outcome):
    idx = np.asarray(outcome.indices, dtype=np.int64)
    n = len(data.unlabeled_x)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"selected index outside the unlabeled pool of {n}")
    return TrainingView(data, idx, outcome.pseudo_labels)
