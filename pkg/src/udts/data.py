"""Long-tailed semi-supervised datasets: synthesis, access scoping and the container file.

Ground-truth labels of the unlabeled split live only on :class:`SemiDataset`
and are handed out exclusively through :meth:`SemiDataset.evaluation_access`.
Training code receives a :class:`TrainingData`, which has no such field.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .rng import generator

GENERATOR_KINDS = ("gaussian-blobs", "two-moons-like", "file")


@dataclass(frozen=True)
class ClassProfile:
    class_count: int
    head_count: int
    imbalance_ratio: float


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def class_counts(profile):
    """Exponentially decaying per-class counts from head (class 0) to tail.

    ``n_c = round(n_1 * gamma ** (-c / (C - 1)))``, rounded half-up and
    clamped to at least 1.

    >>> class_counts(ClassProfile(5, 100, 20.0))
    [100, 47, 22, 11, 5]
    """
    C, n1, gamma = profile.class_count, profile.head_count, profile.imbalance_ratio
    if C < 2:
        raise ConfigError("class_count must be >= 2")
    if not gamma >= 1:
        raise ConfigError(f"imbalance_ratio must be >= 1, got {gamma}")
    if n1 < C:
        raise ConfigError("head_count must be >= class_count")
    return [max(1, _round_half_up(n1 * gamma ** (-c / (C - 1)))) for c in range(C)]


@dataclass(frozen=True)
class DatasetSpec:
    labeled: ClassProfile
    unlabeled: ClassProfile
    kind: str = "gaussian-blobs"
    feature_dim: int = 2
    separation: float = 3.0
    spread: float = 1.0
    test_per_class: int = 200
    seed: int = 0
    path: str = None  # kind == "file"

    @property
    def class_count(self):
        return self.labeled.class_count

    def validate(self):
        if self.kind not in GENERATOR_KINDS:
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if self.kind == "file":
            if not self.path:
                raise ConfigError("generator kind 'file' requires a path")
            return
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.labeled.class_count != self.unlabeled.class_count:
            raise ConfigError("labeled and unlabeled profiles disagree on class_count")
        if not self.separation > 0 or not self.spread > 0:
            raise ConfigError("separation and spread must be > 0")
        if self.test_per_class < 1:
            raise ConfigError("test_per_class must be >= 1")


@dataclass(frozen=True)
class TrainingData:
    """What the training path may see: labeled pairs and unlabeled features only."""

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    class_count: int

    @property
    def labeled_counts(self):
        return np.bincount(self.labeled_y, minlength=self.class_count)


@dataclass(frozen=True)
class EvalAccess:
    """Evaluation-scoped accessor; the only holder of unlabeled ground truth."""

    unlabeled_truth: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_count: int


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


class SemiDataset:
    def __init__(self, labeled_x, labeled_y, unlabeled_x, unlabeled_truth, test_x, test_y, class_count):
        self.labeled_x = _frozen(labeled_x, np.float64)
        self.labeled_y = _frozen(labeled_y, np.int64)
        self.unlabeled_x = _frozen(unlabeled_x, np.float64)
        self._unlabeled_truth = _frozen(unlabeled_truth, np.int64)
        self.test_x = _frozen(test_x, np.float64)
        self.test_y = _frozen(test_y, np.int64)
        self.class_count = int(class_count)
        dims = {self.labeled_x.shape[1], self.unlabeled_x.shape[1], self.test_x.shape[1]}
        if len(dims) != 1:
            raise ConfigError("splits disagree on feature dimension")
        self.feature_dim = dims.pop()

    def training_view(self):
        return TrainingData(self.labeled_x, self.labeled_y, self.unlabeled_x, self.class_count)

    def evaluation_access(self):
        return EvalAccess(self._unlabeled_truth, self.test_x, self.test_y, self.class_count)

    def counts(self):
        """Per-class counts of (labeled, unlabeled, test)."""
        C = self.class_count
        return (
            np.bincount(self.labeled_y, minlength=C),
            np.bincount(self._unlabeled_truth, minlength=C),
            np.bincount(self.test_y, minlength=C),
        )

    def with_unlabeled_truth(self, truth):
        """Copy with replaced hidden labels (used to prove they never reach training)."""
        return SemiDataset(self.labeled_x, self.labeled_y, self.unlabeled_x, truth,
                           self.test_x, self.test_y, self.class_count)

    def __eq__(self, other):
        if not isinstance(other, SemiDataset):
            return NotImplemented
        return self.class_count == other.class_count and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self._arrays(), other._arrays())
        )

    def _arrays(self):
        return (self.labeled_x, self.labeled_y, self.unlabeled_x, self._unlabeled_truth,
                self.test_x, self.test_y)


def class_centers(C, dim, separation):
    """Centers with nearest-neighbour distance equal to ``separation``."""
    centers = np.zeros((C, dim))
    if dim == 1:
        centers[:, 0] = separation * np.arange(C)
    elif dim >= C:
        centers[np.arange(C), np.arange(C)] = separation / np.sqrt(2.0)
    else:
        radius = separation / (2.0 * np.sin(np.pi / C))
        angles = 2.0 * np.pi * np.arange(C) / C
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    return centers


def _sample_class(rng, spec, centers, c, n):
    if spec.kind == "gaussian-blobs" or spec.feature_dim < 2:
        return centers[c] + spec.spread * rng.standard_normal((n, spec.feature_dim))
    # two-moons-like: each class is a noisy half-circle arc around its center,
    # rotated by the class angle
    t = rng.uniform(0.0, np.pi, n)
    phi = 2.0 * np.pi * c / spec.class_count
    r = spec.separation / 2.0
    arc = np.stack([r * np.cos(t + phi), r * np.sin(t + phi)], axis=1)
    x = spec.spread * rng.standard_normal((n, spec.feature_dim))
    x[:, :2] += arc
    return x + centers[c]


def _draw_split(rng, spec, centers, counts):
    xs, ys = [], []
    for c, n in enumerate(counts):
        xs.append(_sample_class(rng, spec, centers, c, n))
        ys.append(np.full(n, c, dtype=np.int64))
    x, y = np.concatenate(xs), np.concatenate(ys)
    order = rng.permutation(len(y))
    return x[order], y[order]


def generate_synthetic(spec):
    spec.validate()
    if spec.kind == "file":
        return load_dataset(spec.path)
    C = spec.class_count
    centers = class_centers(C, spec.feature_dim, spec.separation)
    rng = generator(spec.seed, 0xDA7A)
    lx, ly = _draw_split(rng, spec, centers, class_counts(spec.labeled))
    ux, uy = _draw_split(rng, spec, centers, class_counts(spec.unlabeled))
    tx, ty = _draw_split(rng, spec, centers, [spec.test_per_class] * C)
    return SemiDataset(lx, ly, ux, uy, tx, ty, C)


# Container file layout (all integers little-endian):
#   magic "UDTSDATA" | u32 version | u32 dim | u32 C | u32 section count
#   u64[C] labeled counts | u64[C] unlabeled counts | u64[C] test counts
#   section table: per section  u32 id | u32 flags | u64 offset | u64 byte length
#   section payloads: float64 features (row-major) or int64 labels
MAGIC = b"UDTSDATA"
VERSION = 1
FLAG_EVAL_ONLY = 1
_SECTIONS = (
    (1, "labeled_x", "<f8", 0),
    (2, "labeled_y", "<i8", 0),
    (3, "unlabeled_x", "<f8", 0),
    (4, "unlabeled_truth", "<i8", FLAG_EVAL_ONLY),
    (5, "test_x", "<f8", 0),
    (6, "test_y", "<i8", FLAG_EVAL_ONLY),
)
_PREAMBLE = struct.Struct("<8sIIII")
_ENTRY = struct.Struct("<IIQQ")


def save_dataset(path, dataset):
    C = dataset.class_count
    lab, unl, tst = dataset.counts()
    arrays = dict(zip(("labeled_x", "labeled_y", "unlabeled_x", "unlabeled_truth", "test_x", "test_y"),
                      dataset._arrays()))
    header = _PREAMBLE.pack(MAGIC, VERSION, dataset.feature_dim, C, len(_SECTIONS))
    header += struct.pack(f"<{3 * C}Q", *lab, *unl, *tst)
    offset = len(header) + _ENTRY.size * len(_SECTIONS)
    table, payloads = b"", []
    for sid, name, dtype, flags in _SECTIONS:
        raw = np.ascontiguousarray(arrays[name], dtype=dtype).tobytes()
        table += _ENTRY.pack(sid, flags, offset, len(raw))
        payloads.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(header + table + b"".join(payloads))


def load_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _PREAMBLE.size:
        raise FormatError("file shorter than header", len(buf))
    magic, version, dim, C, n_sections = _PREAMBLE.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError("bad magic bytes", 0)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", 8)
    if dim < 1 or C < 2:
        raise FormatError(f"invalid dim={dim} or class count={C}", 12)
    pos = _PREAMBLE.size
    need = pos + 24 * C + _ENTRY.size * n_sections
    if len(buf) < need:
        raise FormatError("truncated header", len(buf))
    counts = np.array(struct.unpack_from(f"<{3 * C}Q", buf, pos), dtype=np.int64).reshape(3, C)
    pos += 24 * C
    arrays = {}
    known = {sid: (name, dtype) for sid, name, dtype, _ in _SECTIONS}
    for _ in range(n_sections):
        sid, _flags, offset, length = _ENTRY.unpack_from(buf, pos)
        if sid not in known:
            raise FormatError(f"unknown section id {sid}", pos)
        if offset + length > len(buf):
            raise FormatError(f"section {known[sid][0]} truncated", len(buf))
        name, dtype = known[sid]
        arrays[name] = np.frombuffer(buf, dtype=dtype, count=length // 8, offset=offset)
        pos += _ENTRY.size
    missing = [name for _, name, _, _ in _SECTIONS if name not in arrays]
    if missing:
        raise FormatError(f"missing sections {missing}", pos)
    totals = counts.sum(axis=1)
    for name, rows in (("labeled", totals[0]), ("unlabeled", totals[1]), ("test", totals[2])):
        xkey = f"{name}_x"
        ykey = "unlabeled_truth" if name == "unlabeled" else f"{name}_y"
        if arrays[xkey].size != rows * dim or arrays[ykey].size != rows:
            raise FormatError(f"{name} section sizes disagree with header counts", pos)
        arrays[xkey] = arrays[xkey].reshape(rows, dim)
    for key in ("labeled_y", "unlabeled_truth", "test_y"):
        if arrays[key].size and (arrays[key].min() < 0 or arrays[key].max() >= C):
            raise FormatError(f"{key} holds a label outside [0, {C})", pos)
    ds = SemiDataset(arrays["labeled_x"], arrays["labeled_y"], arrays["unlabeled_x"],
                     arrays["unlabeled_truth"], arrays["test_x"], arrays["test_y"], C)
    for split, got, want in zip(("labeled", "unlabeled", "test"), ds.counts(), counts):
        if not np.array_equal(got, want):
            raise FormatError(f"{split} labels disagree with header class counts", _PREAMBLE.size)
    return ds
