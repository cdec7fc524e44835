"""Epoch loop: train on the current view, MC-estimate the unlabeled pool, select, merge, adapt thresholds.

Every random draw is keyed by ``(seed, purpose, epoch, step)``, so a run
resumed from a checkpoint replays exactly what the uninterrupted run does.
"""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, NumericError
from .losses import LossConfig, batch_coefficients, semi_supervised_parts, uncertainty_loss
from .metrics import TrainLogRecord, compute_classification, pseudo_label_quality
from .nn import SgdConfig, forward, init_model, softmax, train_step
from .rng import derive_stream, generator
from .selector import GateConfig, merge_selected, normalized_array, select_batch, select_fixed
from .thresholds import EpochObservation, derive_thresholds, init_state, update_state, ThresholdState
from .uncertainty import McConfig, mc_estimate

log = logging.getLogger(__name__)

MODES = ("udts", "fixed_baseline", "supervised_only")
CHECKPOINT_VERSION = 1

_TAG_INIT, _TAG_SHUFFLE, _TAG_DROPOUT, _TAG_MC, _TAG_JITTER = 11, 12, 13, 14, 15


@dataclass
class TrainConfig:
    epochs: int = 60
    inner_steps: int = None  # None: one pass over the current training view
    hidden_sizes: tuple = (64, 64)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    mc: McConfig = field(default_factory=McConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ema_coeff: float = 0.999
    gamma_mode: str = "class_over_head"
    initial_tau: float = None
    seed: int = 0
    mode: str = "udts"
    fixed_confidence_threshold: float = 0.95
    feature_jitter: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.inner_steps is not None and self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0 <= self.fixed_confidence_threshold <= 1:
            raise ConfigError("fixed_confidence_threshold must lie in [0, 1]")
        if not 0 <= self.ema_coeff <= 1:
            raise ConfigError("ema_coeff must lie in [0, 1]")
        if self.feature_jitter < 0:
            raise ConfigError("feature_jitter must be >= 0")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)

    def fingerprint(self):
        """Hash of everything that shapes a run except its length."""
        d = asdict(self)
        d.pop("epochs")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class RunState:
    model: nn.MlpModel
    thresholds: ThresholdState  # None outside udts mode
    epoch: int
    seed: int
    fingerprint: str
    records: list = field(default_factory=list)
    selected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pseudo_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    selected_uncertainty: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def copy(self):
        return RunState(
            self.model.copy(), None if self.thresholds is None else self.thresholds.copy(),
            self.epoch, self.seed, self.fingerprint, list(self.records),
            self.selected.copy(), self.pseudo_labels.copy(), self.selected_uncertainty.copy(),
        )


@dataclass
class EvalResult:
    confusion: object
    metrics: object


def evaluate(model, test_x, test_y):
    """Deterministic (dropout off) test metrics."""
    if len(test_y) == 0:
        raise ConfigError("test split is empty")
    probs = nn.predict_proba(model, test_x)
    confusion, metrics = compute_classification(probs.argmax(axis=1), test_y, probs)
    return EvalResult(confusion, metrics)


def initial_state(config, dataset):
    C = dataset.class_count
    sizes = [dataset.feature_dim, *config.hidden_sizes, C]
    model = init_model(sizes, derive_stream(config.seed, _TAG_INIT), dropout_rate=config.mc.dropout_rate)
    thresholds = None
    if config.mode == "udts":
        counts = dataset.training_view().labeled_counts
        thresholds = init_state(counts, config.ema_coeff, config.gamma_mode, config.initial_tau)
        derive_thresholds(thresholds)
    return RunState(model, thresholds, 0, config.seed, config.fingerprint())


def _stratified_batches(rng, n_lab, n_pseudo, batch_size, steps):
    """Yield ``(labeled rows, pseudo rows)`` with every batch holding >= 1 labeled row."""
    total = n_lab + n_pseudo
    per_pass = min(max(1, math.ceil(total / batch_size)), n_lab)
    done = 0
    while done < steps:
        lab = np.array_split(rng.permutation(n_lab), per_pass)
        ps = np.array_split(n_lab + rng.permutation(n_pseudo), per_pass)
        for a, b in zip(lab, ps):
            if done == steps:
                return
            yield a, b
            done += 1


def _sgd_epoch(config, state, view, class_weights, epoch):
    model = state.model
    n_lab, n_ps = view.n_labeled, view.n_pseudo
    per_pass = min(max(1, math.ceil(len(view) / config.sgd.batch_size)), n_lab)
    steps = config.inner_steps or per_pass
    rng = generator(state.seed, _TAG_SHUFFLE, epoch)
    totals = np.zeros(4)
    for step, (lab_rows, ps_rows) in enumerate(_stratified_batches(rng, n_lab, n_ps, config.sgd.batch_size, steps)):
        rows = np.concatenate([lab_rows, ps_rows])
        x = view.features(rows)
        if config.feature_jitter:
            x = x + config.feature_jitter * generator(state.seed, _TAG_JITTER, epoch, step).standard_normal(x.shape)
        logits, trace = forward(model, x, dropout_active=True,
                                rng_stream=derive_stream(state.seed, _TAG_DROPOUT, epoch, step))
        probs = softmax(logits)
        targets = view.labels[rows]
        nl = len(lab_rows)
        gates = np.ones(len(ps_rows), dtype=bool)
        omega = None
        if config.loss.sample_weighting == "uncertainty" and len(ps_rows):
            omega = 1.0 - state.selected_uncertainty[ps_rows - n_lab]
        sup, unl = semi_supervised_parts(probs[:nl], targets[:nl], probs[nl:], targets[nl:],
                                         omega, config.loss, class_weights)
        unc = uncertainty_loss(probs[nl:], targets[nl:], gates, len(rows))
        total = sup + unl + config.loss.uncertainty_loss_weight * unc
        if not math.isfinite(total):
            raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
        coef_l, coef_u = batch_coefficients(targets[:nl], targets[nl:], gates, omega, config.loss, class_weights)
        train_step(model, trace, probs, targets, np.ones(len(class_weights)), np.ones(len(rows), dtype=bool),
                   config.sgd, sample_weights=np.concatenate([coef_l, coef_u]))
        totals += (sup, unl, unc, total)
    return totals / steps


def train(config, dataset, resume=None, checkpoint_path=None, observer=None):
    """Run (or continue) training up to ``config.epochs``; returns the final :class:`RunState`.

    ``observer(epoch, estimates, outcome, observation)`` is called after each
    selection. On a non-finite loss or output the last good state is checkpointed (when a
    path is given) and the :class:`NumericError` is re-raised with ``.state``.
    """
    if dataset.feature_dim < 1:
        raise ConfigError("dataset has no features")
    state = initial_state(config, dataset) if resume is None else resume
    if state.fingerprint != config.fingerprint():
        raise FormatError("checkpoint was produced under a different configuration")
    if state.model.num_classes != dataset.class_count or state.model.input_dim != dataset.feature_dim:
        raise ConfigError("model shape does not match the dataset")
    data = dataset.training_view()
    access = dataset.evaluation_access()
    class_weights = config.loss.weights_for(data.labeled_counts)
    mc_cfg = replace(config.mc, base_rng_seed=derive_stream(config.seed, _TAG_MC, config.mc.base_rng_seed))

    while state.epoch < config.epochs:
        last_good = state.copy()
        try:
            _run_epoch(config, state, data, access, class_weights, mc_cfg, observer)
        except NumericError as exc:
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, last_good)
            exc.state = last_good
            raise
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    return state


def _run_epoch(config, state, data, access, class_weights, mc_cfg, observer):
    """Advance ``state`` by one epoch in place and append its record."""
    epoch = state.epoch + 1
    C = data.class_count
    view = merge_selected(data, _Selection(state.selected, state.pseudo_labels))
    losses = _sgd_epoch(config, state, view, class_weights, epoch)
    record = TrainLogRecord(epoch, *[float(v) for v in losses])
    if config.mode == "supervised_only":
        record.loss_unlabeled = record.loss_uncertainty = None
    else:
        est = mc_estimate(state.model, data.unlabeled_x, mc_cfg, sample_ids=np.arange(len(data.unlabeled_x)),
                          epoch=epoch)
        u = normalized_array(est, config.gate.uncertainty_metric)
        if config.mode == "udts":
            outcome = select_batch(est, state.thresholds, config.gate)
        else:
            outcome = select_fixed(est, config.fixed_confidence_threshold, config.gate.uncertainty_metric)
        obs = EpochObservation(est.mean_probs, u)
        if observer is not None:
            observer(epoch, est, outcome, obs)
        state.selected = outcome.indices
        state.pseudo_labels = outcome.pseudo_labels
        state.selected_uncertainty = u[outcome.indices]
        if config.mode == "udts":
            state.thresholds = update_state(state.thresholds, obs)
            derive_thresholds(state.thresholds)
            th = state.thresholds
            record.tau = th.global_tau
            record.class_tau = th.class_tau.tolist()
            record.learning_state = th.learning_state.tolist()
            record.uncertainty_state = th.uncertainty_state.tolist()
            record.class_unc_norm = th.class_unc_norm.tolist()
        quality = pseudo_label_quality(outcome, access)
        record.n_selected = outcome.n_selected
        record.selected_counts = outcome.class_counts.tolist()
        record.pl_precision = quality.precision
        record.pl_recall = quality.recall
        record.class_pl_precision = quality.per_class_precision.tolist()
        record.rejections = outcome.rejection_reasons()
        hits = np.bincount(est.predicted_class, minlength=C)
        sums = np.bincount(est.predicted_class, weights=u, minlength=C)
        record.class_uncertainty = [float(s / h) if h else math.nan for s, h in zip(sums, hits)]
    result = evaluate(state.model, access.test_x, access.test_y)
    record.top1 = result.metrics.top1
    record.top5 = result.metrics.top5
    record.macro_recall = result.metrics.macro_recall
    record.class_recall = result.metrics.per_class_recall.tolist()
    state.records.append(record)
    state.epoch = epoch
    log.debug("epoch %d: top1=%.4f selected=%s", epoch, record.top1, record.n_selected)


def run(config, dataset, **kwargs):
    """``(final model, records)`` of a full run."""
    state = train(config, dataset, **kwargs)
    return state.model, state.records


@dataclass
class _Selection:
    indices: np.ndarray
    pseudo_labels: np.ndarray


def save_checkpoint(path, state):
    arrays = {
        "selected": np.asarray(state.selected, dtype=np.int64),
        "pseudo_labels": np.asarray(state.pseudo_labels, dtype=np.int64),
        "selected_uncertainty": np.asarray(state.selected_uncertainty, dtype=np.float64),
    }
    m = state.model
    for i in range(len(m.weights)):
        arrays[f"model_w{i}"], arrays[f"model_b{i}"] = m.weights[i], m.biases[i]
        arrays[f"model_vw{i}"], arrays[f"model_vb{i}"] = m.velocity_w[i], m.velocity_b[i]
    arrays["model_meta"] = np.frombuffer(json.dumps({
        "version": nn.CHECKPOINT_VERSION, "layer_sizes": list(m.layer_sizes),
        "dropout_rates": list(m.dropout_rates), "step": m.step}).encode(), dtype=np.uint8)
    th = state.thresholds
    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "seed": state.seed,
        "fingerprint": state.fingerprint,
        "records": [r.to_dict() for r in state.records],
        "thresholds": None if th is None else {
            "epoch": th.epoch, "global_tau": th.global_tau, "ema_coeff": th.ema_coeff},
    }
    if th is not None:
        arrays["th_learning"] = th.learning_state
        arrays["th_uncertainty"] = th.uncertainty_state
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, config=None):
    """Read a checkpoint; with ``config`` given, refuse one produced under another configuration."""
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    with data:
        try:
            meta = json.loads(bytes(data["meta"]).decode())
        except (KeyError, ValueError):
            raise FormatError("checkpoint metadata missing") from None
        if meta.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
        if config is not None and meta["fingerprint"] != config.fingerprint():
            raise FormatError("checkpoint does not match the given configuration")
        model = nn.model_from_arrays(data, prefix="model_")
        th = None
        if meta["thresholds"] is not None:
            t = meta["thresholds"]
            th = ThresholdState(t["epoch"], t["global_tau"], np.array(data["th_learning"]),
                                np.array(data["th_uncertainty"]), t["ema_coeff"])
            derive_thresholds(th)
        return RunState(
            model, th, meta["epoch"], meta["seed"], meta["fingerprint"],
            [TrainLogRecord.from_dict(r) for r in meta["records"]],
            np.array(data["selected"]), np.array(data["pseudo_labels"]), np.array(data["selected_uncertainty"]),
        )
