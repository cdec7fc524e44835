"""Dynamic threshold policy.

State per training run:

* a global threshold ``tau``, an EMA of the mean top-class confidence on the
  unlabeled pool,
* a per-class learning state ``p_tilde``, an EMA of the mean probability mass
  the model puts on each class,
* a per-class uncertainty state ``u_tilde``, an EMA of the mean normalized
  uncertainty of samples predicted as each class.

Per-class thresholds are ``MaxNorm(p_tilde) * tau`` and the per-class
uncertainty norms are ``MaxNorm(u_tilde)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DomainError

GAMMA_MODES = ("class_over_head", "head_over_class", "uniform")


@dataclass
class ThresholdState:
    epoch: int
    global_tau: float
    learning_state: np.ndarray
    uncertainty_state: np.ndarray
    ema_coeff: float = 0.999
    class_tau: np.ndarray = field(default=None, repr=False)
    class_unc_norm: np.ndarray = field(default=None, repr=False)
    derived_epoch: int = -1

    @property
    def class_count(self):
        return len(self.learning_state)

    def copy(self):
        return replace(
            self,
            learning_state=self.learning_state.copy(),
            uncertainty_state=self.uncertainty_state.copy(),
            class_tau=None if self.class_tau is None else self.class_tau.copy(),
            class_unc_norm=None if self.class_unc_norm is None else self.class_unc_norm.copy(),
        )


@dataclass(frozen=True)
class EpochObservation:
    """Statistics of one pass over the unlabeled pool.

    ``uncertainty`` is the normalized per-sample uncertainty in [0, 1].
    """

    mean_probs: np.ndarray
    uncertainty: np.ndarray

    @property
    def confidences(self):
        return self.mean_probs.max(axis=1)

    @property
    def predicted(self):
        return self.mean_probs.argmax(axis=1)


def imbalance_coefficients(labeled_counts, gamma_mode="class_over_head"):
    counts = np.asarray(labeled_counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) < 1 or np.any(counts <= 0):
        raise ConfigError("labeled counts must all be positive")
    if gamma_mode == "class_over_head":
        return counts / counts[0]
    if gamma_mode == "head_over_class":
        return counts[0] / counts
    if gamma_mode == "uniform":
        return np.ones_like(counts)
    raise ConfigError(f"unknown gamma_mode {gamma_mode!r}")


def init_state(labeled_counts, ema_coeff=0.999, gamma_mode="class_over_head", initial_tau=None):
    """Epoch-0 state: ``p_tilde(c) = gamma_c / C``, ``tau = 1/C``, ``u_tilde = 1``.

    ``initial_tau`` overrides the starting global threshold.
    """
    if not 0 <= ema_coeff <= 1:
        raise ConfigError("ema_coeff must lie in [0, 1]")
    gamma = imbalance_coefficients(labeled_counts, gamma_mode)
    C = len(gamma)
    tau = 1.0 / C if initial_tau is None else float(initial_tau)
    if not 0 <= tau <= 1:
        raise ConfigError("initial_tau must lie in [0, 1]")
    return ThresholdState(0, tau, gamma / C, np.ones(C), float(ema_coeff))


def max_norm(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DomainError("max_norm of an empty sequence")
    if np.any(v < 0):
        raise DomainError("max_norm expects nonnegative entries")
    top = v.max()
    if top == 0:
        raise DomainError("max_norm of an all-zero sequence")
    return v / top


def update_state(state, obs):
    """One EMA step from an epoch's observation; returns a new state."""
    probs = np.asarray(obs.mean_probs, dtype=np.float64)
    unc = np.asarray(obs.uncertainty, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise DomainError("observation must cover at least one sample")
    lam = state.ema_coeff
    tau = lam * state.global_tau + (1 - lam) * float(probs.max(axis=1).mean())
    learning = lam * state.learning_state + (1 - lam) * probs.mean(axis=0)

    predicted = probs.argmax(axis=1)
    C = state.class_count
    hits = np.bincount(predicted, minlength=C)
    sums = np.bincount(predicted, weights=unc, minlength=C)
    uncertainty = state.uncertainty_state.copy()
    seen = hits > 0
    uncertainty[seen] = lam * uncertainty[seen] + (1 - lam) * (sums[seen] / hits[seen])
    return ThresholdState(state.epoch + 1, tau, learning, uncertainty, lam)


def derive_thresholds(state):
    """Per-class confidence thresholds and uncertainty norms, cached on ``state``."""
    state.class_tau = max_norm(state.learning_state) * state.global_tau
    state.class_unc_norm = max_norm(state.uncertainty_state)
    state.derived_epoch = state.epoch
    return state.class_tau, state.class_unc_norm
