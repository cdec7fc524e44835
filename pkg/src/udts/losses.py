"""Semi-supervised weighted cross-entropy and the gate-masked uncertainty loss."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .nn import LOG_FLOOR

SAMPLE_WEIGHTINGS = ("uniform", "uncertainty")


@dataclass(frozen=True)
class LossConfig:
    unlabeled_weight: float = 1.0
    class_weights: tuple = None  # None: inverse labeled frequency, mean 1
    uncertainty_loss_weight: float = 1.0
    sample_weighting: str = "uniform"  # "uncertainty": omega_i = 1 - u_i

    def __post_init__(self):
        if not self.unlabeled_weight >= 0 or not self.uncertainty_loss_weight >= 0:
            raise ConfigError("loss weights must be >= 0")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(~np.isfinite(w)) or np.any(w <= 0):
                raise ConfigError("class_weights must be positive and finite")
        if self.sample_weighting not in SAMPLE_WEIGHTINGS:
            raise ConfigError(f"sample_weighting must be one of {SAMPLE_WEIGHTINGS}")

    def weights_for(self, labeled_counts):
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if len(w) != len(labeled_counts):
                raise ConfigError("class_weights length differs from class count")
            return w
        return inverse_frequency_weights(labeled_counts)


def inverse_frequency_weights(counts):
    inv = 1.0 / np.asarray(counts, dtype=np.float64)
    return inv / inv.mean()


def _ce_terms(probs, targets):
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.int64)
    if p.ndim != 2 or len(p) != len(y):
        raise ShapeError("probs rows and targets differ in length")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise IndexError("target outside the class range")
    return -np.log(np.maximum(p[np.arange(len(y)), y], LOG_FLOOR)), y


@dataclass(frozen=True)
class LossComponents:
    supervised: float
    unlabeled: float  # already scaled by the unlabeled weight
    uncertainty: float

    @property
    def semi_supervised(self):
        return self.supervised + self.unlabeled


def semi_supervised_parts(labeled_probs, labeled_targets, pseudo_probs, pseudo_targets,
                          sample_weights, cfg, class_weights=None):
    """``(supervised, weighted unlabeled)`` terms of the semi-supervised CE."""
    ce_l, y_l = _ce_terms(labeled_probs, labeled_targets)
    if len(y_l) == 0:
        raise ConfigError("semi-supervised CE needs at least one labeled sample")
    C = np.asarray(labeled_probs).shape[1]
    w = np.ones(C) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    supervised = float(np.mean(w[y_l] * ce_l))
    if pseudo_probs is None or len(pseudo_targets) == 0:
        return supervised, 0.0
    ce_u, y_u = _ce_terms(pseudo_probs, pseudo_targets)
    omega = np.ones(len(y_u)) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    if np.any(omega < 0):
        raise ConfigError("per-sample weights must be >= 0")
    return supervised, float(cfg.unlabeled_weight * np.mean(omega * w[y_u] * ce_u))


def semi_supervised_ce(labeled_probs, labeled_targets, pseudo_probs, pseudo_targets,
                       sample_weights, cfg, class_weights=None):
    """``mean_l w CE + lambda * mean_u omega w CE``; the second term vanishes without pseudo samples."""
    sup, unl = semi_supervised_parts(labeled_probs, labeled_targets, pseudo_probs, pseudo_targets,
                                     sample_weights, cfg, class_weights)
    return sup + unl


def uncertainty_loss(probs, pseudo_targets, gates, batch_size):
    """``-(1/B) * sum over gated samples of log p[pseudo target]``."""
    g = np.asarray(gates, dtype=bool)
    p = np.asarray(probs, dtype=np.float64)
    if g.shape != (len(p),):
        raise ShapeError("gates length differs from probs rows")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if not g.any():
        return 0.0
    ce, _ = _ce_terms(p[g], np.asarray(pseudo_targets)[g])
    return float(ce.sum() / batch_size)


def total_loss(components, cfg):
    parts = (components.supervised, components.unlabeled, components.uncertainty)
    if not all(math.isfinite(v) for v in parts):
        raise NumericError(f"non-finite loss component in {parts}")
    return components.semi_supervised + cfg.uncertainty_loss_weight * components.uncertainty


def batch_coefficients(labeled_targets, pseudo_targets, pseudo_gates, sample_weights, cfg, class_weights):
    """Per-sample factors ``c_i`` with ``total_loss = sum_i c_i * -log p[i, y_i]``.

    Covers a mini-batch of labeled rows followed by pseudo rows, ``B`` being
    the total row count. Pseudo rows with a closed gate get ``c_i = 0`` and do
    not count towards the unlabeled average. Feeding these as sample weights (with unit class
    weights) to :func:`udts.nn.gradients` differentiates the full objective.
    """
    y_l = np.asarray(labeled_targets, dtype=np.int64)
    y_u = np.asarray(pseudo_targets, dtype=np.int64)
    g = np.asarray(pseudo_gates, dtype=bool)
    if len(y_l) == 0:
        raise ConfigError("mini-batch needs at least one labeled sample")
    w = np.asarray(class_weights, dtype=np.float64)
    B = len(y_l) + len(y_u)
    coef_l = w[y_l] / len(y_l)
    n_u = int(g.sum())
    if n_u == 0:
        return coef_l, np.zeros(len(y_u))
    omega = np.ones(len(y_u)) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    coef_u = cfg.unlabeled_weight * omega * w[y_u] / n_u + cfg.uncertainty_loss_weight / B
    return coef_l, np.where(g, coef_u, 0.0)
