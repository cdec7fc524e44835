"""Feed-forward classifier with inverted dropout, trained by momentum SGD.

Hidden layers use ReLU; the output layer is linear and feeds a softmax.
Matrices are float64 numpy arrays laid out row-major, one sample per row.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError, StateError
from .rng import generator, uniforms

LOG_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


@dataclass
class SgdConfig:
    learning_rate: float = 0.03
    momentum: float = 0.99
    weight_decay: float = 0.0005
    batch_size: int = 64

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class MlpModel:
    layer_sizes: tuple
    weights: list
    biases: list
    dropout_rates: list
    velocity_w: list = field(default_factory=list)
    velocity_b: list = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if not self.velocity_w:
            self.velocity_w = [np.zeros_like(w) for w in self.weights]
            self.velocity_b = [np.zeros_like(b) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ShapeError(f"layer {i} parameters do not match layer_sizes {self.layer_sizes}")
        if len(self.dropout_rates) != self.n_hidden:
            raise ConfigError("need one dropout rate per hidden layer")
        for p in self.dropout_rates:
            if not 0 <= p < 1:
                raise ConfigError(f"dropout rate {p} outside [0, 1)")

    @property
    def n_hidden(self):
        return len(self.layer_sizes) - 2

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def num_classes(self):
        return self.layer_sizes[-1]

    def parameters(self):
        return [*self.weights, *self.biases]

    def copy(self):
        return MlpModel(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.dropout_rates),
            [v.copy() for v in self.velocity_w],
            [v.copy() for v in self.velocity_b],
            self.step,
        )

    def same_as(self, other):
        """Bitwise equality of architecture, parameters and optimizer state."""
        if self.layer_sizes != other.layer_sizes or self.step != other.step:
            return False
        if list(self.dropout_rates) != list(other.dropout_rates):
            return False
        pairs = zip(
            [*self.weights, *self.biases, *self.velocity_w, *self.velocity_b],
            [*other.weights, *other.biases, *other.velocity_w, *other.velocity_b],
        )
        return all(np.array_equal(a, b) for a, b in pairs)


@dataclass
class ForwardTrace:
    inputs: list        # input to each layer
    pre_activations: list  # hidden-layer z before ReLU
    masks: list         # hidden-layer dropout masks, entries in {0, 1/(1-p)}
    model_step: int
    layer_sizes: tuple


def init_model(layer_sizes, seed, dropout_rate=0.5):
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigError(f"layer_sizes needs >= 2 positive entries, got {list(layer_sizes)}")
    rng = generator(seed, 0x1417)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(sizes), weights, biases, [float(dropout_rate)] * (len(sizes) - 2))


def _as_batch(batch, dim):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"batch of shape {x.shape} does not match input dim {dim}")
    return x


def forward(model, batch, dropout_active=False, rng_stream=0, sample_ids=None, dropout_rate=None):
    """Logits for ``batch`` plus the trace needed to backpropagate.

    With dropout active, the mask for row ``i`` depends only on
    ``(rng_stream, sample_ids[i], layer)``; ``sample_ids`` defaults to the row
    positions. ``dropout_rate`` overrides the model's per-layer rates.
    """
    a = _as_batch(batch, model.input_dim)
    if sample_ids is None:
        sample_ids = np.arange(a.shape[0])
    elif len(sample_ids) != a.shape[0]:
        raise ShapeError("sample_ids length differs from batch rows")
    # overflow is reported once, as a NumericError from softmax
    with np.errstate(over="ignore", invalid="ignore"):
        inputs, pres, masks = [], [], []
        for layer in range(model.n_hidden):
            inputs.append(a)
            z = a @ model.weights[layer] + model.biases[layer]
            h = np.maximum(z, 0.0)
            p = model.dropout_rates[layer] if dropout_rate is None else dropout_rate
            if dropout_active and p > 0:
                u = uniforms(rng_stream, sample_ids, layer, z.shape[1])
                m = (u >= p) / (1.0 - p)
                h = h * m
            else:
                m = np.ones_like(z)
            pres.append(z)
            masks.append(m)
            a = h
        inputs.append(a)
        logits = a @ model.weights[-1] + model.biases[-1]
    return logits, ForwardTrace(inputs, pres, masks, model.step, model.layer_sizes)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model, batch):
    logits, _ = forward(model, batch)
    return softmax(logits)


def _check_targets(targets, num_classes):
    y = np.asarray(targets, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise IndexError(f"target outside [0, {num_classes})")
    return y


def weighted_cross_entropy(probs, targets, class_weights):
    """Mean over rows of ``w[y] * -log p[y]``, with p floored at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    y = _check_targets(targets, p.shape[1])
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (p.shape[1],) or np.any(w <= 0):
        raise ConfigError("class_weights must hold one positive weight per class")
    picked = p[np.arange(len(y)), y]
    return float(np.mean(w[y] * -np.log(np.maximum(picked, LOG_FLOOR))))


def _loss_coefficients(n, targets, class_weights, sample_gates, sample_weights):
    gates = np.asarray(sample_gates, dtype=bool)
    if gates.shape != (n,):
        raise ShapeError("sample_gates length differs from batch rows")
    s = np.full(n, 1.0 / n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    w = np.asarray(class_weights, dtype=np.float64)
    return np.where(gates, s * w[targets], 0.0)


def gradients(model, trace, probs, targets, class_weights, sample_gates, sample_weights=None):
    """Gradients of ``sum_i gate_i * s_i * w[y_i] * -log p[i, y_i]``.

    ``s_i`` defaults to ``1/N`` so that, with all gates open, the objective is
    :func:`weighted_cross_entropy`. Returns ``(weight_grads, bias_grads)``.
    """
    if trace.layer_sizes != model.layer_sizes or trace.model_step != model.step:
        raise StateError("forward trace does not belong to the current model state")
    p = np.asarray(probs, dtype=np.float64)
    n = trace.inputs[0].shape[0]
    if p.shape != (n, model.num_classes):
        raise StateError(f"probs shape {p.shape} does not match trace batch of {n} rows")
    y = _check_targets(targets, model.num_classes)
    coef = _loss_coefficients(n, y, class_weights, sample_gates, sample_weights)

    delta = p.copy()
    delta[np.arange(n), y] -= 1.0
    delta *= coef[:, None]
    gw = [None] * len(model.weights)
    gb = [None] * len(model.biases)
    for layer in range(len(model.weights) - 1, -1, -1):
        gw[layer] = trace.inputs[layer].T @ delta
        gb[layer] = delta.sum(axis=0)
        if layer == 0:
            break
        delta = delta @ model.weights[layer].T
        delta = delta * trace.masks[layer - 1] * (trace.pre_activations[layer - 1] > 0)
    return gw, gb


def train_step(model, trace, probs, targets, class_weights, sample_gates, cfg, sample_weights=None):
    """One momentum-SGD update, in place; returns ``model``.

    Weight decay is coupled into the gradient (``g + wd * theta``) for every
    parameter, then ``v = momentum * v + g`` and ``theta -= lr * v``.
    """
    gw, gb = gradients(model, trace, probs, targets, class_weights, sample_gates, sample_weights)
    params = [*model.weights, *model.biases]
    grads = [*gw, *gb]
    vels = [*model.velocity_w, *model.velocity_b]
    for theta, g, v in zip(params, grads, vels):
        if cfg.weight_decay:
            g = g + cfg.weight_decay * theta
        v *= cfg.momentum
        v += g
        theta -= cfg.learning_rate * v
    if not all(np.all(np.isfinite(t)) for t in params):
        raise NumericError("non-finite parameter after SGD step")
    model.step += 1
    return model


def save_model(path, model):
    arrays = {}
    for i in range(len(model.weights)):
        arrays[f"w{i}"] = model.weights[i]
        arrays[f"b{i}"] = model.biases[i]
        arrays[f"vw{i}"] = model.velocity_w[i]
        arrays[f"vb{i}"] = model.velocity_b[i]
    meta = {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "dropout_rates": list(model.dropout_rates),
        "step": model.step,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def model_from_arrays(arrays, prefix=""):
    try:
        meta = json.loads(bytes(arrays[prefix + "meta"]).decode())
    except (KeyError, ValueError) as exc:
        raise FormatError(f"model metadata unreadable: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported model version {meta.get('version')}")
    n = len(meta["layer_sizes"]) - 1
    try:
        pick = lambda key: [np.array(arrays[f"{prefix}{key}{i}"]) for i in range(n)]
        return MlpModel(
            tuple(meta["layer_sizes"]), pick("w"), pick("b"), meta["dropout_rates"],
            pick("vw"), pick("vb"), meta["step"],
        )
    except KeyError as exc:
        raise FormatError(f"model array missing: {exc}") from None


def load_model(path):
    with np.load(path, allow_pickle=False) as data:
        return model_from_arrays(data)
