"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are repeated in the "acceptance criteria" section at the end of
the pytest run. Tolerances and runtime budgets are the contract values.
"""

import csv
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import report
from oracles import fd_instances, finite_difference_check
from udts.cli import EXIT_OK, main
from udts.config import parse_config
from udts.data import generate_synthetic
from udts.metrics import emit_report
from udts.selector import GateConfig, select_batch
from udts.thresholds import ThresholdState, derive_thresholds, max_norm, update_state, EpochObservation
from udts.trainer import TrainConfig, load_checkpoint, train
from udts.uncertainty import McEstimates, mc_standard_error, predictive_entropy

ACCEPTANCE_INI = Path(__file__).resolve().parents[1] / "configs" / "acceptance.ini"
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def acceptance():
    return parse_config(ACCEPTANCE_INI)


def test_criterion_1_unit_oracles():
    start = time.perf_counter()
    oracle = -sum(p * math.log(p) for p in (0.7, 0.2, 0.1))
    h = predictive_entropy([0.7, 0.2, 0.1])
    entropy_ok = abs(h - 0.801819) <= 1e-6 and abs(h - oracle) <= 1e-12
    norm_ok = max_norm([2, 1, 4]).tolist() == [0.5, 0.25, 1.0]
    state = ThresholdState(0, 0.5, np.array([0.5, 0.5]), np.ones(2), 0.9)
    tau = update_state(state, EpochObservation(np.array([[0.8, 0.2], [0.2, 0.8]]), np.zeros(2))).global_tau
    ema_ok = abs(tau - 0.53) <= 1e-12
    elapsed = time.perf_counter() - start
    ok = entropy_ok and norm_ok and ema_ok and elapsed < 1.0
    report(1, ok, f"entropy={h:.7f} max_norm={max_norm([2, 1, 4]).tolist()} ema={tau!r} ({elapsed:.3f}s < 1s)")
    assert ok


def test_criterion_2_gradient_check():
    start = time.perf_counter()
    worst = max(finite_difference_check(*inst) for inst in fd_instances(10))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 5.0
    report(2, ok, f"max relative error {worst:.2e} < 1e-3 over 10 [3,5,4] nets ({elapsed:.2f}s < 5s)")
    assert ok


def _random_state(rng, C):
    s = ThresholdState(0, float(rng.uniform()), rng.uniform(0.01, 1, C), rng.uniform(0.01, 1, C))
    derive_thresholds(s)
    return s


def _oracle_gate(p, ent, std, s, cfg):
    """Per-sample gate written out from the definition."""
    C = len(p)
    c = max(range(C), key=lambda k: (p[k], -k))
    if cfg.uncertainty_metric == "entropy":
        u = min(ent / math.log(C), 1.0)
    else:
        u = min(std / 0.5, 1.0)
    tau_unc = s.global_tau if cfg.uncertainty_threshold is None else cfg.uncertainty_threshold
    if cfg.per_class_unc_modulation:
        tau_unc = tau_unc * s.class_unc_norm[c]
    return p[c] >= s.class_tau[c] and u <= tau_unc


def _random_estimates(rng, n, C):
    p = rng.dirichlet(np.full(C, 0.4), size=n)
    ent = np.array([predictive_entropy(row) for row in p])
    return McEstimates(p, ent, rng.uniform(0, 0.5, n))


def test_criterion_3_selection_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    C = 5
    est = _random_estimates(rng, 1000, C)
    mismatches = 0
    for k in range(20):
        s = _random_state(rng, C)
        cfg = GateConfig(uncertainty_metric=("entropy", "std")[k % 2], per_class_unc_modulation=k % 4 >= 2,
                         uncertainty_threshold=None if k % 3 else float(rng.uniform()))
        got = set(select_batch(est, s, cfg).indices.tolist())
        want = {i for i in range(1000) if _oracle_gate(est.mean_probs[i], est.entropy[i], est.std[i], s, cfg)}
        mismatches += got != want

    # monotonicity: sharpening towards the predicted class and shrinking the
    # pass spread never closes an open gate
    violations = 0
    base = _random_estimates(rng, 10_000, C)
    alpha = rng.uniform(0, 1, 10_000)[:, None]
    onehot = np.eye(C)[base.predicted_class]
    sharp_p = (1 - alpha) * base.mean_probs + alpha * onehot
    sharp = McEstimates(sharp_p, [predictive_entropy(r) for r in sharp_p], base.std * rng.uniform(0, 1, 10_000))
    for k in range(10):
        s = _random_state(rng, C)
        cfg = GateConfig(uncertainty_metric=("entropy", "std")[k % 2], per_class_unc_modulation=bool(k % 3))
        rows = slice(1000 * k, 1000 * (k + 1))
        before = select_batch(base[rows], s, cfg).gates
        after = select_batch(sharp[rows], s, cfg).gates
        violations += int(np.sum(before & ~after))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and violations == 0 and elapsed < 10.0
    report(3, ok, f"{mismatches}/20 state mismatches on 1000 estimates, {violations}/10000 monotonicity "
                  f"violations ({elapsed:.2f}s < 10s)")
    assert ok


def test_criterion_4_mc_scaling(acceptance):
    start = time.perf_counter()
    cfg = replace(acceptance.train, epochs=5, mode="supervised_only")
    dataset = generate_synthetic(acceptance.data)
    model = train(cfg, dataset).model
    x = dataset.training_view().unlabeled_x
    se10 = mc_standard_error(model, x, 10, 100, base_seed=1)
    se40 = mc_standard_error(model, x, 40, 100, base_seed=2)
    ratio = se10 / se40
    elapsed = time.perf_counter() - start
    ok = 1.6 <= ratio <= 2.6 and elapsed < 30.0
    report(4, ok, f"SE(T=10)/SE(T=40) = {ratio:.3f} in [1.6, 2.6] over 100 repeats ({elapsed:.1f}s < 30s)")
    assert ok


def _paired(acceptance, seed, epochs=None):
    run_cfg = acceptance.with_seed(seed)
    dataset = generate_synthetic(run_cfg.data)
    cfg = run_cfg.train if epochs is None else replace(run_cfg.train, epochs=epochs)
    udts = train(cfg, dataset).records[-1]
    base = train(replace(cfg, mode="fixed_baseline"), dataset).records[-1]
    return udts, base


@pytest.mark.slow
def test_criterion_5_desk_scale_benefit(acceptance):
    start = time.perf_counter()
    precision_ok, gains, parts = True, [], []
    for seed in SEEDS:
        u, b = _paired(acceptance, seed)
        tail_u, tail_b = np.mean(u.class_recall[-2:]), np.mean(b.class_recall[-2:])
        precision_ok &= u.pl_precision >= b.pl_precision
        gains.append(tail_u - tail_b)
        parts.append(f"seed {seed}: precision {u.pl_precision:.3f} vs {b.pl_precision:.3f}, "
                     f"tail recall {tail_u:.3f} vs {tail_b:.3f}")
    gain = 100 * float(np.mean(gains))
    elapsed = time.perf_counter() - start
    ok = precision_ok and gain >= 3.0 and elapsed < 300.0
    report(5, ok, f"(a) precision >= baseline on every seed: {precision_ok}; (b) tail recall gain "
                  f"{gain:+.1f} points >= 3 ({elapsed:.0f}s < 300s) [" + "; ".join(parts) + "]")
    assert ok


def test_criterion_6_baseline_nesting(acceptance):
    start = time.perf_counter()
    dataset = generate_synthetic(acceptance.data)
    threshold = acceptance.train.fixed_confidence_threshold
    degenerate = replace(acceptance.train, epochs=10, ema_coeff=1.0, gamma_mode="uniform", initial_tau=threshold,
                         gate=GateConfig(uncertainty_threshold=1.0))
    baseline = replace(degenerate, mode="fixed_baseline")
    picks = {}
    for name, cfg in (("udts", degenerate), ("fixed", baseline)):
        picks[name] = []
        train(cfg, dataset, observer=lambda e, est, out, obs, acc=picks[name]: acc.append(out.indices.tolist()))
    same = sum(a == b for a, b in zip(picks["udts"], picks["fixed"]))
    sizes = [len(p) for p in picks["fixed"]]
    elapsed = time.perf_counter() - start
    ok = same == 10 and len(picks["udts"]) == 10 and elapsed < 60.0
    report(6, ok, f"{same}/10 epochs select identical sets (baseline sizes {sizes}) ({elapsed:.1f}s < 60s)")
    assert ok


def test_criterion_7_determinism_and_resume(acceptance, tmp_path):
    dataset = generate_synthetic(acceptance.data)
    cfg = replace(acceptance.train, epochs=6)
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        emit_report(train(cfg, dataset).records, tmp_path / name, dataset.class_count)
    identical = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    full = train(cfg, dataset)
    train(replace(cfg, epochs=3), dataset, checkpoint_path=tmp_path / "ck.npz")
    resumed = train(cfg, dataset, resume=load_checkpoint(tmp_path / "ck.npz", cfg))
    same_records = [r.to_dict() for r in resumed.records] == [r.to_dict() for r in full.records]
    same_model = resumed.model.same_as(full.model)
    ok = identical and same_records and same_model
    report(7, ok, f"byte-identical metrics.csv: {identical}; resume at epoch 3 matches records: {same_records}, "
                  f"parameters: {same_model}")
    assert ok


def test_criterion_8_sweep_t(tmp_path):
    short = tmp_path / "sweep.ini"
    short.write_text(ACCEPTANCE_INI.read_text().replace("epochs = 60", "epochs = 20"))
    code = main(["sweep-t", "--config", str(short), "--out", str(tmp_path / "out")])
    with open(tmp_path / "out" / "sweep_t.csv") as fh:
        rows = list(csv.DictReader(fh))
    ts = [int(r["T"]) for r in rows]
    errs = [float(r["mc_std_error"]) for r in rows]
    columns_ok = bool(rows) and list(rows[0]) == ["T", "top1", "mc_std_error", "wall_time"]
    non_increasing = all(a >= b for a, b in zip(errs, errs[1:]))
    ok = code == EXIT_OK and ts == [2, 6, 10, 12] and columns_ok and non_increasing
    report(8, ok, f"T={ts}, mc_std_error={[f'{e:.4g}' for e in errs]} non-increasing: {non_increasing}")
    assert ok


def test_acceptance_config_is_a_train_config(acceptance):
    assert isinstance(acceptance.train, TrainConfig)
    assert acceptance.train.fixed_confidence_threshold == 0.95 and acceptance.train.epochs == 60
