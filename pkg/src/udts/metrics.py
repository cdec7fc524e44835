"""Classification and pseudo-label quality metrics, and deterministic CSV/JSON emission.

Undefined rates (empty denominators) are carried as ``NaN`` in memory and
written as the sentinel ``NA``; they are never reported as 0.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import EvalAccess
from .errors import CapabilityError, ShapeError

NA = "NA"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, cols: predicted class

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass
class ClassificationMetrics:
    top1: float
    top5: float
    per_class_recall: np.ndarray  # NaN for classes absent from the truths
    support: np.ndarray

    @property
    def macro_recall(self):
        defined = ~np.isnan(self.per_class_recall)
        return float(self.per_class_recall[defined].mean()) if defined.any() else math.nan


def top_k_hits(probs, truths, k):
    """Whether each true class ranks within the top ``k``; ties go to the lower class index."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(truths, dtype=np.int64)
    true_p = p[np.arange(len(y)), y][:, None]
    cols = np.arange(p.shape[1])[None, :]
    rank = np.sum(p > true_p, axis=1) + np.sum((p == true_p) & (cols < y[:, None]), axis=1)
    return rank < k


def compute_classification(preds, truths, probs=None, class_count=None):
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ShapeError(f"preds {preds.shape} and truths {truths.shape} differ")
    if probs is not None:
        probs = np.asarray(probs, dtype=np.float64)
        if len(probs) != len(truths):
            raise ShapeError("probs rows differ from truths")
        C = probs.shape[1]
    else:
        C = class_count or int(max(preds.max(initial=0), truths.max(initial=0)) + 1)
    counts = np.zeros((C, C), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    support = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, np.diag(counts) / np.maximum(support, 1), np.nan)
    top1 = float(np.mean(preds == truths)) if len(truths) else math.nan
    top5 = float(np.mean(top_k_hits(probs, truths, 5))) if probs is not None and len(truths) else math.nan
    return ConfusionMatrix(counts), ClassificationMetrics(top1, top5, recall, support)


@dataclass
class PseudoLabelQuality:
    precision: float  # NaN when nothing was selected
    recall: float
    per_class_precision: np.ndarray  # by pseudo-label class
    per_class_recall: np.ndarray  # by true class


def pseudo_label_quality(outcome, access):
    """Precision/recall of selected pseudo-labels against hidden ground truth.

    ``access`` must be the evaluation-scoped accessor of the dataset.
    """
    if not isinstance(access, EvalAccess):
        raise CapabilityError("pseudo-label quality requires the evaluation accessor")
    truth = access.unlabeled_truth
    C = access.class_count
    idx = np.asarray(outcome.indices, dtype=np.int64)
    labels = np.asarray(outcome.pseudo_labels, dtype=np.int64)
    correct = labels == truth[idx]
    sel_per_class = np.bincount(labels, minlength=C)
    right_per_class = np.bincount(labels[correct], minlength=C)
    truth_per_class = np.bincount(truth, minlength=C)
    with np.errstate(invalid="ignore", divide="ignore"):
        pc_precision = np.where(sel_per_class > 0, right_per_class / np.maximum(sel_per_class, 1), np.nan)
        pc_recall = np.where(truth_per_class > 0, right_per_class / np.maximum(truth_per_class, 1), np.nan)
    precision = float(correct.mean()) if len(idx) else math.nan
    recall = float(correct.sum() / len(truth)) if len(truth) else math.nan
    return PseudoLabelQuality(precision, recall, pc_precision, pc_recall)


@dataclass
class TrainLogRecord:
    """One epoch of a training run. Per-class lists have length C; ``None`` means not applicable."""

    epoch: int
    loss_supervised: float
    loss_unlabeled: float = None
    loss_uncertainty: float = None
    loss_total: float = None
    tau: float = None
    class_tau: list = None
    learning_state: list = None
    uncertainty_state: list = None
    class_unc_norm: list = None
    n_selected: int = None
    selected_counts: list = None
    pl_precision: float = None
    pl_recall: float = None
    class_pl_precision: list = None
    rejections: dict = None
    top1: float = None
    top5: float = None
    macro_recall: float = None
    class_recall: list = field(default_factory=list)
    class_uncertainty: list = None

    def to_dict(self):
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    return obj


def format_value(v):
    if v is None or (isinstance(v, (float, np.floating)) and math.isnan(v)):
        return NA
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".6g")


def _per_class(name, C):
    return [f"{name}_c{c}" for c in range(C)]


def metrics_columns(C):
    """Column order of ``metrics.csv`` for ``C`` classes."""
    return [
        "epoch", "loss_supervised", "loss_unlabeled", "loss_uncertainty", "loss_total",
        "tau", *_per_class("tau", C), "n_selected", *_per_class("selected", C),
        "pl_precision", "pl_recall", "top1", "top5", "macro_recall",
        *_per_class("recall", C), *_per_class("uncertainty", C),
    ]


def threshold_columns(C):
    return ["epoch", "tau", *_per_class("learning_state", C), *_per_class("uncertainty_state", C),
            *_per_class("tau", C), *_per_class("unc_norm", C)]


def selection_columns(C):
    return ["epoch", *_per_class("selected", C), *_per_class("precision", C),
            "failed_confidence", "failed_uncertainty", "failed_both", "ranked_out"]


def _pad(values, C):
    return [None] * C if values is None else list(values)


def metrics_row(r, C):
    return [
        r.epoch, r.loss_supervised, r.loss_unlabeled, r.loss_uncertainty, r.loss_total,
        r.tau, *_pad(r.class_tau, C), r.n_selected, *_pad(r.selected_counts, C),
        r.pl_precision, r.pl_recall, r.top1, r.top5, r.macro_recall,
        *_pad(r.class_recall, C), *_pad(r.class_uncertainty, C),
    ]


def threshold_row(r, C):
    return [r.epoch, r.tau, *_pad(r.learning_state, C), *_pad(r.uncertainty_state, C),
            *_pad(r.class_tau, C), *_pad(r.class_unc_norm, C)]


def selection_row(r, C):
    rej = r.rejections or {}
    return [r.epoch, *_pad(r.selected_counts, C), *_pad(r.class_pl_precision, C),
            rej.get("failed_confidence"), rej.get("failed_uncertainty"),
            rej.get("failed_both"), rej.get("ranked_out")]


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])


def read_csv(path):
    """Parse an emitted CSV into dicts of floats (``None`` for ``NA``)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (None if v == NA else float(v)) for k, v in row.items()} for row in rows]


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def emit_report(records, out_dir, class_count, summary=None):
    """Write ``metrics.csv``, ``thresholds.csv``, ``selection.csv`` and ``summary.json``."""
    if not records:
        raise ValueError("emit_report needs at least one record")
    out = Path(out_dir)
    C = class_count
    write_csv(out / "metrics.csv", metrics_columns(C), [metrics_row(r, C) for r in records])
    write_csv(out / "thresholds.csv", threshold_columns(C), [threshold_row(r, C) for r in records])
    write_csv(out / "selection.csv", selection_columns(C), [selection_row(r, C) for r in records])
    payload = {"final": records[-1].to_dict(), "epochs": len(records)}
    if summary:
        payload.update(summary)
    write_json(out / "summary.json", payload)
    return [out / n for n in ("metrics.csv", "thresholds.csv", "selection.csv", "summary.json")]
