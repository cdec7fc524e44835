"""``udts`` command line: gen-data, train, eval, sweep-t and report.

All files go to the output directory: ``--out``, else ``$UDTS_OUTPUT_DIR``,
else ``./udts-out``. Exit codes are listed in :data:`EXIT_CODES`.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import build, default_values, parse_config
from .data import generate_synthetic, load_dataset, save_dataset
from .errors import ConfigError, FormatError, NumericError, UdtsError
from .metrics import emit_report, write_json
from .trainer import MODES, evaluate, load_checkpoint, train
from .uncertainty import mc_standard_error

log = logging.getLogger("udts")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5
EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_FAILURE: "unexpected internal error",
    EXIT_USAGE: "bad command-line usage",
    EXIT_CONFIG: "configuration error (parse, unknown key, range)",
    EXIT_DATA: "data error (missing or malformed dataset or checkpoint)",
    EXIT_NUMERIC: "numeric divergence (last good checkpoint written)",
}
OUTPUT_ENV = "UDTS_OUTPUT_DIR"
DEFAULT_OUTPUT = "udts-out"
DATASET_FILE = "dataset.udts"
CHECKPOINT_FILE = "checkpoint.npz"


class DataError(UdtsError):
    """Missing or unreadable input data; maps to the data exit code."""


def build_parser():
    p = argparse.ArgumentParser(prog="udts", description="Uncertainty-aware dynamic-threshold pseudo-labeling "
                                "on long-tailed synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI configuration file (defaults apply when omitted)")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides [train] seed (and the dataset seed unless set)")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset container")
    common(sp)
    sp = sub.add_parser("train", help="train and write metrics, thresholds, selection, summary and checkpoint")
    common(sp)
    sp.add_argument("--data", help="dataset container to train on instead of the [data] section")
    sp.add_argument("--mode", choices=MODES, help="overrides [train] mode")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="dataset container (default: regenerate from the configuration)")
    sp = sub.add_parser("sweep-t", help="train once per MC pass count T and compare")
    common(sp)
    sp.add_argument("--data", help="dataset container to train on instead of the [data] section")
    sp.add_argument("--t-values", help="comma-separated T values (overrides [sweep] t_values)")
    sp = sub.add_parser("report", help="re-emit report files from a checkpoint's records")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True)
    return p


def output_dir(args):
    return Path(args.out or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def load_run_config(args):
    cfg = parse_config(args.config) if args.config else build(default_values())
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "mode", None):
        cfg = cfg.with_mode(args.mode)
    return cfg


def load_data(args, cfg):
    path = getattr(args, "data", None)
    if path is None and cfg.data.kind != "file":
        return generate_synthetic(cfg.data)
    path = path or cfg.data.path
    if not Path(path).is_file():
        raise DataError(f"dataset not found: {path}")
    ds = load_dataset(path)
    if ds.class_count != cfg.data.class_count:
        raise ConfigError(f"[data] class_count is {cfg.data.class_count} but {path} has {ds.class_count} classes")
    return ds


def _summary(cfg, state, dataset):
    return {
        "seed": cfg.train.seed,
        "mode": cfg.train.mode,
        "fingerprint": state.fingerprint,
        "config": cfg.to_dict(),
        "class_counts": {k: v.tolist() for k, v in zip(("labeled", "unlabeled", "test"), dataset.counts())},
    }


def cmd_gen_data(args, cfg, out):
    ds = generate_synthetic(cfg.data)
    out.mkdir(parents=True, exist_ok=True)
    path = out / DATASET_FILE
    save_dataset(path, ds)
    lab, unl, tst = ds.counts()
    print(f"wrote {path}: labeled {lab.tolist()} unlabeled {unl.tolist()} test {tst.tolist()}")
    return EXIT_OK


def cmd_train(args, cfg, out):
    dataset = load_data(args, cfg)
    resume = None
    if args.resume:
        if not Path(args.resume).is_file():
            raise DataError(f"checkpoint not found: {args.resume}")
        resume = load_checkpoint(args.resume, cfg.train)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    state = train(cfg.train, dataset, resume=resume, checkpoint_path=out / CHECKPOINT_FILE)
    elapsed = time.perf_counter() - start
    emit_report(state.records, out, dataset.class_count, summary=_summary(cfg, state, dataset))
    write_json(out / "timing.json", {"wall_time_seconds": elapsed, "epochs_run": len(state.records)})
    final = state.records[-1]
    print(f"epoch {final.epoch}: top1={final.top1:.4f} macro_recall={final.macro_recall:.4f} "
          f"selected={final.n_selected} -> {out}")
    return EXIT_OK


def cmd_eval(args, cfg, out):
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    state = load_checkpoint(args.checkpoint)
    dataset = load_data(args, cfg)
    access = dataset.evaluation_access()
    result = evaluate(state.model, access.test_x, access.test_y)
    m = result.metrics
    payload = {
        "checkpoint_epoch": state.epoch,
        "top1": m.top1,
        "top5": m.top5,
        "macro_recall": m.macro_recall,
        "per_class_recall": m.per_class_recall.tolist(),
        "confusion": result.confusion.counts.tolist(),
    }
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "eval.json", payload)
    print(json.dumps({k: payload[k] for k in ("top1", "top5", "macro_recall")}, sort_keys=True))
    return EXIT_OK


def sweep_t(cfg, dataset, t_values, repeats):
    """One training run per T, plus the MC standard error of each T on a shared reference model.

    The reference model is the final model of the run at the configured T, so
    the standard-error column isolates the effect of T from training noise.
    """
    rows, models = [], {}
    for T in t_values:
        tcfg = replace(cfg.train, mc=replace(cfg.train.mc, passes=T))
        start = time.perf_counter()
        state = train(tcfg, dataset)
        models[T] = state.model
        rows.append({"T": T, "top1": state.records[-1].top1, "wall_time": time.perf_counter() - start})
    ref_T = cfg.train.mc.passes
    reference = models.get(ref_T) or train(cfg.train, dataset).model
    x = dataset.training_view().unlabeled_x
    for row in rows:
        row["mc_std_error"] = mc_standard_error(reference, x, row["T"], repeats, base_seed=cfg.train.seed,
                                                dropout_rate=cfg.train.mc.dropout_rate)
    return rows


def cmd_sweep_t(args, cfg, out):
    t_values = cfg.sweep.t_values
    if args.t_values:
        try:
            t_values = tuple(int(v) for v in args.t_values.split(","))
        except ValueError:
            raise ConfigError(f"--t-values: expected comma-separated integers, got {args.t_values!r}") from None
        if not all(t > 0 for t in t_values):
            raise ConfigError("--t-values: every T must be > 0")
    dataset = load_data(args, cfg)
    rows = sweep_t(cfg, dataset, t_values, cfg.sweep.repeats)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep_t.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T", "top1", "mc_std_error", "wall_time"])
        for r in rows:
            w.writerow([r["T"], f"{r['top1']:.6g}", f"{r['mc_std_error']:.6g}", f"{r['wall_time']:.3f}"])
    for r in rows:
        print(f"T={r['T']:>3}  top1={r['top1']:.4f}  mc_std_error={r['mc_std_error']:.6g}")
    return EXIT_OK


def cmd_report(args, cfg, out):
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    state = load_checkpoint(args.checkpoint)
    if not state.records:
        raise DataError("checkpoint holds no epoch records")
    out.mkdir(parents=True, exist_ok=True)
    C = state.model.num_classes
    emit_report(state.records, out, C, summary={"seed": state.seed, "fingerprint": state.fingerprint})
    r = state.records[-1]
    print(f"{len(state.records)} epochs; final top1={r.top1:.4f} macro_recall={r.macro_recall:.4f}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "sweep-t": cmd_sweep_t, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
        return COMMANDS[args.command](args, cfg, output_dir(args))
    except ConfigError as exc:
        print(f"udts: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"udts: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"udts: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UdtsError as exc:
        print(f"udts: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
