import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from udts.data import EvalAccess
from udts.errors import CapabilityError, ShapeError
from udts.metrics import (
    NA, TrainLogRecord, compute_classification, emit_report, format_value, metrics_columns,
    pseudo_label_quality, read_csv, selection_columns, threshold_columns, top_k_hits,
)
from udts.selector import SelectionOutcome


def outcome(indices, labels):
    return SelectionOutcome(np.asarray(indices), np.asarray(labels), None, None, None, None, None)


def access(truth, C=3):
    return EvalAccess(np.asarray(truth), np.zeros((1, 2)), np.zeros(1, int), C)


class TestClassification:
    def test_hand_recall(self):
        conf, m = compute_classification([0, 1, 1], [0, 0, 1])
        assert m.per_class_recall.tolist() == [0.5, 1.0]
        assert conf.counts.tolist() == [[1, 1], [0, 1]]
        assert conf.total == 3

    def test_all_correct(self):
        conf, m = compute_classification([0, 1, 2], [0, 1, 2])
        assert np.array_equal(conf.counts, np.eye(3, dtype=int))
        assert m.top1 == 1.0 and m.macro_recall == 1.0

    def test_absent_class_is_undefined(self):
        _, m = compute_classification([0, 0], [0, 0], class_count=3)
        assert m.per_class_recall[0] == 1.0 and np.isnan(m.per_class_recall[1:]).all()
        assert m.macro_recall == 1.0

    def test_top5_with_five_classes(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(5), size=50)
        _, m = compute_classification(p.argmax(1), rng.integers(0, 5, 50), p)
        assert m.top5 == 1.0

    def test_top5_random_logits(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(10), size=20000)
        y = rng.integers(0, 10, 20000)
        _, m = compute_classification(p.argmax(1), y, p)
        assert abs(m.top5 - 0.5) < 0.03

    def test_tie_break_by_lower_index(self):
        p = np.full((2, 4), 0.25)
        assert top_k_hits(p, [1, 2], 2).tolist() == [True, False]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compute_classification([0, 1], [0])

    @given(st.integers(0, 10_000))
    def test_recall_weighted_by_support_is_top1(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 4, 40)
        preds = rng.integers(0, 4, 40)
        _, m = compute_classification(preds, y, class_count=4)
        defined = m.support > 0
        assert np.dot(m.per_class_recall[defined], m.support[defined]) / 40 == pytest.approx(m.top1)

    @given(st.integers(0, 10_000))
    def test_top_k_monotone(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(6), size=30)
        y = rng.integers(0, 6, 30)
        rates = [top_k_hits(p, y, k).mean() for k in range(1, 7)]
        assert all(a <= b for a, b in zip(rates, rates[1:])) and rates[-1] == 1.0


class TestPseudoLabelQuality:
    def test_precision(self):
        q = pseudo_label_quality(outcome([0, 1, 2, 3], [0, 1, 2, 0]), access([0, 1, 2, 1, 2, 2]))
        assert q.precision == 0.75
        assert q.recall == pytest.approx(3 / 6)
        assert q.per_class_precision.tolist() == [0.5, 1.0, 1.0]

    def test_empty_selection(self):
        q = pseudo_label_quality(outcome([], []), access([0, 1]))
        assert math.isnan(q.precision) and q.recall == 0.0

    def test_all_correct(self):
        q = pseudo_label_quality(outcome([0, 1, 2], [2, 0, 1]), access([2, 0, 1]))
        assert q.precision == q.recall == 1.0

    def test_permutation_invariant(self):
        a = pseudo_label_quality(outcome([0, 3, 5], [0, 1, 2]), access([0, 1, 2, 1, 0, 2]))
        b = pseudo_label_quality(outcome([5, 0, 3], [2, 0, 1]), access([0, 1, 2, 1, 0, 2]))
        assert a.precision == b.precision and a.recall == b.recall

    def test_capability(self):
        with pytest.raises(CapabilityError):
            pseudo_label_quality(outcome([0], [0]), np.array([0, 1]))


def records(C=2, n=3):
    out = []
    for e in range(1, n + 1):
        out.append(TrainLogRecord(
            epoch=e, loss_supervised=1.0 / e, loss_unlabeled=0.1234567, loss_uncertainty=0.5, loss_total=1.6,
            tau=0.3 + e / 100, class_tau=[0.3, 0.1], learning_state=[0.5, 0.1], uncertainty_state=[1.0, 0.8],
            class_unc_norm=[1.0, 0.8], n_selected=10 * e, selected_counts=[7, 3 * e - 2], pl_precision=0.9,
            pl_recall=0.4, class_pl_precision=[1.0, math.nan], rejections={"failed_confidence": 1,
            "failed_uncertainty": 2, "failed_both": 3, "ranked_out": 0}, top1=0.8, top5=1.0,
            macro_recall=0.75, class_recall=[0.9, 0.6], class_uncertainty=[0.2, math.nan]))
    return out


class TestReport:
    def test_formatting(self):
        assert format_value(None) == NA
        assert format_value(math.nan) == NA
        assert format_value(1 / 3) == "0.333333"
        assert format_value(7) == "7"
        assert format_value(True) == "1"

    def test_files_and_schema(self, tmp_path):
        paths = emit_report(records(), tmp_path, 2, summary={"seed": 4})
        assert [p.name for p in paths] == ["metrics.csv", "thresholds.csv", "selection.csv", "summary.json"]
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0].split(",")
        assert header == metrics_columns(2)
        assert (tmp_path / "thresholds.csv").read_text().splitlines()[0].split(",") == threshold_columns(2)
        assert (tmp_path / "selection.csv").read_text().splitlines()[0].split(",") == selection_columns(2)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["seed"] == 4 and summary["epochs"] == 3
        assert summary["final"]["class_uncertainty"] == [0.2, None]

    def test_byte_deterministic(self, tmp_path):
        (tmp_path / "a").mkdir()
        emit_report(records(), tmp_path / "a", 2)
        (tmp_path / "b").mkdir()
        emit_report(records(), tmp_path / "b", 2)
        for name in ("metrics.csv", "thresholds.csv", "selection.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_parse_back(self, tmp_path):
        recs = records()
        emit_report(recs, tmp_path, 2)
        rows = read_csv(tmp_path / "metrics.csv")
        for r, row in zip(recs, rows):
            assert row["loss_supervised"] == pytest.approx(r.loss_supervised, rel=5e-6)
            assert row["loss_unlabeled"] == pytest.approx(0.123457, abs=0)
            assert row["uncertainty_c1"] is None
            assert row["selected_c1"] == r.selected_counts[1]

    def test_record_round_trip(self):
        r = records(n=1)[0]
        back = TrainLogRecord.from_dict(json.loads(json.dumps(r.to_dict())))
        assert back.class_pl_precision == [1.0, None] and back.epoch == 1

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report([], tmp_path, 2)

    def test_supervised_only_rows_use_sentinel(self, tmp_path):
        emit_report([TrainLogRecord(1, 0.5, top1=0.4, top5=1.0, macro_recall=0.4, class_recall=[0.4, 0.4])],
                    tmp_path, 2)
        row = read_csv(tmp_path / "metrics.csv")[0]
        assert row["tau"] is None and row["n_selected"] is None and row["top1"] == 0.4
