import numpy as np
import pytest

from udts.data import ClassProfile, DatasetSpec, generate_synthetic
from udts.errors import ConfigError, FormatError, NumericError
from udts.metrics import emit_report
from udts.nn import SgdConfig
from udts.losses import LossConfig
from udts.selector import GateConfig
from udts.thresholds import derive_thresholds, init_state, update_state
from udts.trainer import TrainConfig, evaluate, load_checkpoint, run, save_checkpoint, train
from udts.uncertainty import McConfig


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(DatasetSpec(ClassProfile(3, 30, 5.0), ClassProfile(3, 90, 5.0),
                                          test_per_class=20, seed=3))


def cfg(**kw):
    base = dict(epochs=4, hidden_sizes=(16,), sgd=SgdConfig(0.05, 0.9, 5e-4, 32), mc=McConfig(passes=4),
                seed=1, ema_coeff=0.9, loss=LossConfig(class_weights=(1.0, 1.0, 1.0)))
    base.update(kw)
    return TrainConfig(**base)


class TestRun:
    def test_one_record_per_epoch(self, dataset):
        _, recs = run(cfg(), dataset)
        assert [r.epoch for r in recs] == [1, 2, 3, 4]
        assert all(r.tau is not None and len(r.class_tau) == 3 for r in recs)

    def test_supervised_only(self, dataset):
        _, recs = run(cfg(epochs=1, mode="supervised_only"), dataset)
        r = recs[0]
        assert r.loss_supervised > 0
        assert r.loss_unlabeled is None and r.n_selected is None and r.tau is None
        assert r.top1 is not None

    def test_fixed_baseline_has_no_thresholds(self, dataset):
        _, recs = run(cfg(epochs=2, mode="fixed_baseline"), dataset)
        assert recs[-1].tau is None and recs[-1].n_selected is not None

    def test_deterministic(self, dataset, tmp_path):
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            emit_report(run(cfg(), dataset)[1], tmp_path / name, 3)
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_seed_changes_run(self, dataset):
        a, _ = run(cfg(epochs=1), dataset)
        b, _ = run(cfg(epochs=1, seed=2), dataset)
        assert not a.same_as(b)

    def test_hidden_truth_never_reaches_training(self, dataset):
        shuffled = dataset.with_unlabeled_truth(np.roll(dataset.evaluation_access().unlabeled_truth, 7))
        a, ra = run(cfg(), dataset)
        b, rb = run(cfg(), shuffled)
        assert a.same_as(b)
        assert [r.n_selected for r in ra] == [r.n_selected for r in rb]

    def test_threshold_log_replays(self, dataset):
        observations = []
        state = train(cfg(), dataset, observer=lambda e, est, out, obs: observations.append(obs))
        replay = init_state(dataset.training_view().labeled_counts, 0.9)
        for obs, rec in zip(observations, state.records):
            replay = update_state(replay, obs)
            derive_thresholds(replay)
            assert replay.global_tau == rec.tau
            assert replay.class_tau.tolist() == rec.class_tau

    def test_model_shape_mismatch(self, dataset):
        other = generate_synthetic(DatasetSpec(ClassProfile(4, 30, 5.0), ClassProfile(4, 60, 5.0),
                                               test_per_class=5, seed=0))
        state = train(cfg(epochs=1), dataset)
        with pytest.raises(ConfigError):
            train(cfg(epochs=2), other, resume=state)

    def test_divergence_raises_with_last_good_state(self, dataset, tmp_path):
        path = tmp_path / "ck.npz"
        with pytest.raises(NumericError) as info:
            train(cfg(sgd=SgdConfig(1e200, 0.9, 0.0, 32)), dataset, checkpoint_path=path)
        assert path.exists()
        good = info.value.state
        assert load_checkpoint(path).epoch == good.epoch
        assert all(np.isfinite(p).all() for p in good.model.parameters())

    def test_config_validation(self):
        for kw in (dict(epochs=0), dict(mode="cotrain"), dict(ema_coeff=2.0), dict(inner_steps=0),
                   dict(fixed_confidence_threshold=1.5)):
            with pytest.raises(ConfigError):
                cfg(**kw)


class TestCheckpoint:
    def test_resume_matches_uninterrupted(self, dataset, tmp_path):
        full = train(cfg(epochs=5), dataset)
        train(cfg(epochs=3), dataset, checkpoint_path=tmp_path / "ck.npz")
        resumed = train(cfg(epochs=5), dataset, resume=load_checkpoint(tmp_path / "ck.npz", cfg(epochs=5)))
        assert [r.to_dict() for r in resumed.records] == [r.to_dict() for r in full.records]
        assert resumed.model.same_as(full.model)

    def test_round_trip(self, dataset, tmp_path):
        state = train(cfg(epochs=2), dataset)
        save_checkpoint(tmp_path / "ck.npz", state)
        back = load_checkpoint(tmp_path / "ck.npz")
        assert back.model.same_as(state.model)
        assert back.epoch == 2 and back.fingerprint == state.fingerprint
        assert np.array_equal(back.selected, state.selected)
        assert back.thresholds.global_tau == state.thresholds.global_tau
        np.testing.assert_array_equal(back.thresholds.class_tau, state.thresholds.class_tau)
        assert [r.to_dict() for r in back.records] == [r.to_dict() for r in state.records]

    def test_mismatched_config(self, dataset, tmp_path):
        save_checkpoint(tmp_path / "ck.npz", train(cfg(epochs=1), dataset))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "ck.npz", cfg(epochs=1, seed=9))
        with pytest.raises(FormatError):
            train(cfg(epochs=2, gate=GateConfig(uncertainty_metric="std")), dataset,
                  resume=load_checkpoint(tmp_path / "ck.npz"))

    def test_garbage_file(self, tmp_path):
        (tmp_path / "x.npz").write_bytes(b"not a checkpoint")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "x.npz")


class TestEvaluate:
    def test_perfect_model(self, dataset):
        model, _ = run(cfg(epochs=1), dataset)
        access = dataset.evaluation_access()
        preds = evaluate(model, access.test_x, access.test_y).confusion.counts.sum(axis=0)
        assert preds.sum() == len(access.test_y)

    def test_empty(self, dataset):
        model, _ = run(cfg(epochs=1), dataset)
        with pytest.raises(ConfigError):
            evaluate(model, np.zeros((0, 2)), np.zeros(0, int))
