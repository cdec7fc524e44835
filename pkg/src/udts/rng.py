"""Counter-based random streams.

Dropout masks are drawn from a stateless hash of ``(stream, sample id, layer,
unit)`` rather than from a sequential generator. A sample therefore receives
the same mask no matter how the batch around it is partitioned or ordered,
and independent passes can run in any order.

The mixer is the SplitMix64 finalizer, evaluated in wrapping uint64
arithmetic, so results do not depend on platform word size.
"""

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix_int(z):
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _M1) & _MASK64
    z = ((z ^ (z >> 27)) * _M2) & _MASK64
    return z ^ (z >> 31)


def _mix_array(z):
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_stream(*parts):
    """Fold integers into a 64-bit stream key.

    ``derive_stream(seed, epoch, pass_index)`` names one independent substream;
    any change in any part yields an unrelated key.
    """
    h = _GOLDEN
    for p in parts:
        h = _mix_int(h + _GOLDEN + (int(p) & _MASK64))
    return h


def uniforms(stream, sample_ids, layer, width):
    """Uniform draws in [0, 1) of shape ``(len(sample_ids), width)``."""
    ids = np.asarray(sample_ids, dtype=np.int64).astype(np.uint64)
    base = np.uint64(derive_stream(stream, layer))
    with np.errstate(over="ignore"):
        rows = _mix_array(base ^ _mix_array(ids + np.uint64(_GOLDEN)))
        cols = (np.arange(1, width + 1, dtype=np.uint64) * np.uint64(_GOLDEN))
        z = _mix_array(rows[:, None] + cols[None, :])
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def generator(*parts):
    """A numpy Generator seeded from a derived stream key (shuffles, data synthesis)."""
    return np.random.default_rng(derive_stream(*parts))
