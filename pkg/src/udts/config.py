"""INI-style run configuration: sections, defaults and per-key validation.

An empty file yields the documented defaults. Every key belongs to one
section; unknown sections or keys are rejected with their line number, and
range violations name the offending ``[section] key``.
"""

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .data import ClassProfile, DatasetSpec, GENERATOR_KINDS
from .errors import ConfigError
from .losses import SAMPLE_WEIGHTINGS, LossConfig
from .nn import SgdConfig
from .selector import UNCERTAINTY_METRICS, GateConfig
from .thresholds import GAMMA_MODES
from .trainer import MODES, TrainConfig
from .uncertainty import McConfig

DEFAULT_SWEEP_T = (2, 6, 10, 12)


@dataclass(frozen=True)
class SweepConfig:
    t_values: tuple = DEFAULT_SWEEP_T
    repeats: int = 20  # MC repeats per T when measuring the standard error of the mean


@dataclass
class RunConfig:
    data: DatasetSpec
    train: TrainConfig
    sweep: SweepConfig = field(default_factory=SweepConfig)
    data_seed_explicit: bool = False

    def with_seed(self, seed):
        """Copy with the run seed replaced; the dataset follows unless its seed was set explicitly."""
        from dataclasses import replace
        data = self.data if self.data_seed_explicit else replace(self.data, seed=seed)
        return RunConfig(data, replace(self.train, seed=seed), self.sweep, self.data_seed_explicit)

    def with_mode(self, mode):
        from dataclasses import replace
        if mode not in MODES:
            raise ConfigError(f"[train] mode: must be one of {MODES}, got {mode!r}")
        return RunConfig(self.data, replace(self.train, mode=mode), self.sweep, self.data_seed_explicit)

    def to_dict(self):
        from dataclasses import asdict
        return {"data": asdict(self.data), "train": asdict(self.train), "sweep": asdict(self.sweep)}


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _optional(parse):
    def inner(text):
        return None if text.strip().lower() in ("", "none", "auto") else parse(text)
    return inner


def _int_list(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _float_list(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _in_unit(v):
    return 0 <= v <= 1


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _choice(options):
    def check(v):
        return v in options
    check.__doc__ = f"one of {options}"
    return check


# section -> key -> (parser, default, check or None, range description)
SCHEMA = {
    "data": {
        "kind": (str, "gaussian-blobs", _choice(GENERATOR_KINDS), f"one of {GENERATOR_KINDS}"),
        "path": (_optional(str), None, None, ""),
        "class_count": (int, 5, lambda v: v >= 2, ">= 2"),
        "labeled_head": (int, 100, _positive, "> 0"),
        "labeled_gamma": (float, 20.0, lambda v: v >= 1, ">= 1"),
        "unlabeled_head": (int, 400, _positive, "> 0"),
        "unlabeled_gamma": (float, 20.0, lambda v: v >= 1, ">= 1"),
        "feature_dim": (int, 2, _positive, "> 0"),
        "separation": (float, 3.0, _positive, "> 0"),
        "spread": (float, 1.0, _positive, "> 0"),
        "test_per_class": (int, 200, _positive, "> 0"),
        "seed": (_optional(int), None, None, ""),
    },
    "model": {
        "hidden_sizes": (_int_list, (64, 64), lambda v: all(h > 0 for h in v), "positive integers"),
        "dropout_rate": (float, 0.5, lambda v: 0 <= v < 1, "in [0, 1)"),
    },
    "sgd": {
        "learning_rate": (float, 0.03, _positive, "> 0"),
        "momentum": (float, 0.99, lambda v: 0 <= v < 1, "in [0, 1)"),
        "weight_decay": (float, 0.0005, _non_negative, ">= 0"),
        "batch_size": (int, 64, _positive, "> 0"),
    },
    "mc": {
        "passes": (int, 10, _positive, "> 0"),
        "base_rng_seed": (int, 0, None, ""),
    },
    "gate": {
        "uncertainty_metric": (str, "entropy", _choice(UNCERTAINTY_METRICS), f"one of {UNCERTAINTY_METRICS}"),
        "per_class_unc_modulation": (_bool, False, None, ""),
        "score_ranking": (_bool, False, None, ""),
        "score_beta": (float, 1.0, _non_negative, ">= 0"),
        "score_keep_fraction": (float, 0.5, lambda v: 0 < v <= 1, "in (0, 1]"),
        "uncertainty_threshold": (_optional(float), None, _in_unit, "in [0, 1]"),
    },
    "threshold": {
        "ema_coeff": (float, 0.999, _in_unit, "in [0, 1]"),
        "gamma_mode": (str, "class_over_head", _choice(GAMMA_MODES), f"one of {GAMMA_MODES}"),
        "initial_tau": (_optional(float), None, _in_unit, "in [0, 1]"),
    },
    "loss": {
        "unlabeled_weight": (float, 1.0, _non_negative, ">= 0"),
        "class_weights": (_optional(_float_list), None, lambda v: all(w > 0 for w in v), "positive"),
        "uncertainty_loss_weight": (float, 1.0, _non_negative, ">= 0"),
        "sample_weighting": (str, "uniform", _choice(SAMPLE_WEIGHTINGS), f"one of {SAMPLE_WEIGHTINGS}"),
    },
    "train": {
        "epochs": (int, 60, _positive, "> 0"),
        "inner_steps": (_optional(int), None, _positive, "> 0"),
        "seed": (int, 0, None, ""),
        "mode": (str, "udts", _choice(MODES), f"one of {MODES}"),
        "fixed_confidence_threshold": (float, 0.95, _in_unit, "in [0, 1]"),
        "feature_jitter": (float, 0.0, _non_negative, ">= 0"),
    },
    "sweep": {
        "t_values": (_int_list, DEFAULT_SWEEP_T, lambda v: len(v) > 0 and all(t > 0 for t in v), "positive integers"),
        "repeats": (int, 20, lambda v: v >= 2, ">= 2"),
    },
}
# ``T`` is accepted as a synonym of ``[mc] passes``.
ALIASES = {("mc", "t"): "passes"}


def _locate(lines, section, key=None):
    """1-based line of ``[section]`` (or of ``key`` inside it); 0 if not found."""
    current = None
    for no, line in enumerate(lines, 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section:
            k = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            if k == key:
                return no
    return 0


def default_values():
    return {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}


def parse_text(text, base_dir=None):
    """Parse configuration text into a :class:`RunConfig`."""
    lines = text.splitlines()
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="\0none")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        where = f" (line {line})" if line else ""
        raise ConfigError(f"cannot parse configuration{where}: {exc.message.splitlines()[0]}") from None
    values = default_values()
    explicit = set()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}] at line {_locate(lines, section)}")
        for raw_key, text_value in parser.items(section):
            key = ALIASES.get((section, raw_key), raw_key)
            line = _locate(lines, section, raw_key)
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}] {raw_key} at line {line}")
            parse, _default, check, describe = SCHEMA[section][key]
            try:
                value = parse(text_value)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} (line {line}): cannot parse {text_value!r}: {exc}") from None
            if isinstance(value, float) and not math.isfinite(value):
                raise ConfigError(f"[{section}] {key} (line {line}): must be finite")
            if value is not None and check is not None and not check(value):
                raise ConfigError(f"[{section}] {key} (line {line}): {value!r} out of range, must be {describe}")
            values[section][key] = value
            explicit.add((section, key))
    return build(values, explicit, base_dir)


def parse_config(path):
    """Read and validate a configuration file; paths inside resolve against its directory."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc.strerror}") from None
    return parse_text(text, base_dir=p.parent)


def build(values, explicit=(), base_dir=None):
    d, m, t = values["data"], values["model"], values["train"]
    C = d["class_count"]
    for key in ("labeled_head", "unlabeled_head"):
        if d[key] < C:
            raise ConfigError(f"[data] {key}: must be >= class_count ({C})")
    weights = values["loss"]["class_weights"]
    if weights is not None and len(weights) != C:
        raise ConfigError(f"[loss] class_weights: needs {C} entries, got {len(weights)}")
    path = d["path"]
    if d["kind"] == "file":
        if path is None:
            raise ConfigError("[data] path: required when kind = file")
        if base_dir is not None:
            path = str(Path(base_dir) / path)
    seed_explicit = d["seed"] is not None
    data = DatasetSpec(
        labeled=ClassProfile(C, d["labeled_head"], d["labeled_gamma"]),
        unlabeled=ClassProfile(C, d["unlabeled_head"], d["unlabeled_gamma"]),
        kind=d["kind"], feature_dim=d["feature_dim"], separation=d["separation"], spread=d["spread"],
        test_per_class=d["test_per_class"], seed=d["seed"] if seed_explicit else t["seed"], path=path,
    )
    mc = McConfig(values["mc"]["passes"], m["dropout_rate"], values["mc"]["base_rng_seed"])
    th = values["threshold"]
    train = TrainConfig(
        epochs=t["epochs"], inner_steps=t["inner_steps"], hidden_sizes=m["hidden_sizes"],
        sgd=SgdConfig(**values["sgd"]), mc=mc, gate=GateConfig(**values["gate"]),
        loss=LossConfig(**values["loss"]), ema_coeff=th["ema_coeff"], gamma_mode=th["gamma_mode"],
        initial_tau=th["initial_tau"], seed=t["seed"], mode=t["mode"],
        fixed_confidence_threshold=t["fixed_confidence_threshold"], feature_jitter=t["feature_jitter"],
    )
    sweep = SweepConfig(tuple(values["sweep"]["t_values"]), values["sweep"]["repeats"])
    return RunConfig(data, train, sweep, seed_explicit)


def render(values):
    """INI text for a nested ``{section: {key: value}}`` mapping (``None`` written as ``none``)."""
    out = []
    for section, keys in values.items():
        out.append(f"[{section}]")
        for key, v in keys.items():
            if v is None:
                text = "none"
            elif isinstance(v, (tuple, list)):
                text = ", ".join(str(x) for x in v)
            else:
                text = str(v)
            out.append(f"{key} = {text}")
        out.append("")
    return "\n".join(out)
