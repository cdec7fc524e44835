"""Monte-Carlo dropout estimates: mean class probabilities, predictive entropy and pass spread."""

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .nn import forward, softmax
from .rng import derive_stream


@dataclass(frozen=True)
class McConfig:
    passes: int = 10
    dropout_rate: float = 0.5
    base_rng_seed: int = 0

    def __post_init__(self):
        if self.passes < 1:
            raise ConfigError("passes (T) must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")


@dataclass(frozen=True)
class UncertaintyEstimate:
    mean_probs: tuple
    entropy: float
    std: float
    predicted_class: int
    confidence: float

    @property
    def class_count(self):
        return len(self.mean_probs)


def predictive_entropy(mean_probs):
    """Natural-log entropy of a probability vector, with ``0 log 0 = 0``."""
    total = 0.0
    mass = 0.0
    for p in mean_probs:
        p = float(p)
        if p < 0:
            raise DomainError(f"negative probability {p}")
        mass += p
        if p > 0:
            total -= p * math.log(p)
    if abs(mass - 1.0) > 1e-6:
        raise DomainError(f"probabilities sum to {mass}, not 1")
    return total


def std_uncertainty(pass_probs):
    """Per-class population std across passes (rows), averaged over classes."""
    rows = [list(r) for r in pass_probs]
    if not rows:
        raise ShapeError("need at least one pass")
    if len({len(r) for r in rows}) != 1:
        raise ShapeError("ragged pass matrix")
    return float(np.std(np.array(rows, dtype=np.float64), axis=0).mean())


class McEstimates(Sequence):
    """Array-backed sequence of :class:`UncertaintyEstimate`, one per sample."""

    def __init__(self, mean_probs, entropy, std):
        self.mean_probs = np.asarray(mean_probs, dtype=np.float64)
        self.entropy = np.asarray(entropy, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.predicted_class = np.argmax(self.mean_probs, axis=1)
        self.confidence = self.mean_probs[np.arange(len(self.mean_probs)), self.predicted_class]

    @classmethod
    def from_estimates(cls, estimates):
        return cls([e.mean_probs for e in estimates], [e.entropy for e in estimates],
                   [e.std for e in estimates])

    @property
    def class_count(self):
        return self.mean_probs.shape[1]

    def __len__(self):
        return len(self.entropy)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return McEstimates(self.mean_probs[i], self.entropy[i], self.std[i])
        return UncertaintyEstimate(
            tuple(self.mean_probs[i].tolist()), float(self.entropy[i]), float(self.std[i]),
            int(self.predicted_class[i]), float(self.confidence[i]),
        )

    def to_csv(self, path):
        C = self.class_count
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", *[f"mu_c{c}" for c in range(C)], "entropy", "std", "predicted", "confidence"])
            for i in range(len(self)):
                w.writerow([i, *(f"{v:.6g}" for v in self.mean_probs[i]), f"{self.entropy[i]:.6g}",
                            f"{self.std[i]:.6g}", int(self.predicted_class[i]), f"{self.confidence[i]:.6g}"])


def estimate_from_passes(pass_probs):
    """Summarise a ``T x N x C`` stack of per-pass probabilities."""
    p = np.asarray(pass_probs, dtype=np.float64)
    if p.ndim != 3:
        raise ShapeError("expected a T x N x C array of pass probabilities")
    # shifted by the first pass so identical passes give exactly mu = p[0], std = 0
    dev = p - p[0]
    mu = p[0] + dev.mean(axis=0)
    logs = np.log(np.where(mu > 0, mu, 1.0))
    entropy = -(mu * logs).sum(axis=1)
    std = dev.std(axis=0).mean(axis=1)
    return McEstimates(mu, entropy, std)


def pass_stream(base_seed, epoch, pass_index):
    return derive_stream(base_seed, epoch, pass_index)


def mc_estimate(model, batch, cfg, sample_ids=None, epoch=0):
    """T stochastic forward passes with dropout at ``cfg.dropout_rate``.

    Pass ``t`` uses the substream ``(cfg.base_rng_seed, epoch, t)`` and masks
    keyed by ``sample_ids`` (default: row positions), so the estimate for a
    sample does not depend on which batch it is evaluated in.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ShapeError("mc_estimate needs a nonempty 2-D batch")
    if sample_ids is None:
        sample_ids = np.arange(len(x))
    passes = np.empty((cfg.passes, len(x), model.num_classes))
    for t in range(cfg.passes):
        logits, _ = forward(model, x, dropout_active=True,
                            rng_stream=pass_stream(cfg.base_rng_seed, epoch, t),
                            sample_ids=sample_ids, dropout_rate=cfg.dropout_rate)
        passes[t] = softmax(logits)
    return estimate_from_passes(passes)


def mc_standard_error(model, batch, passes, repeats, base_seed=0, dropout_rate=0.5):
    """Empirical standard error of the MC mean: the spread of ``mu`` over independent repeats.

    Each repeat is a full ``passes``-pass estimate on its own substream; the
    result is the across-repeat standard deviation (ddof=1) averaged over
    samples and classes.
    """
    if repeats < 2:
        raise ConfigError("repeats must be >= 2")
    mus = np.stack([
        mc_estimate(model, batch, McConfig(passes, dropout_rate, derive_stream(base_seed, passes, r))).mean_probs
        for r in range(repeats)
    ])
    return float(mus.std(axis=0, ddof=1).mean())
