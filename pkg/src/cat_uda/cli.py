"""Command line: ``generate``, ``train``, ``evaluate`` and ``report``.

Exit codes: 0 success, 2 configuration error, 3 training failure, 4 I/O error.
The default output root is ``$CAT_UDA_OUTPUT`` (``runs`` when unset).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import calibration as cal
from .checkpoint import CheckpointError, load_checkpoint
from .config import ExperimentConfig, load_config
from .data import (
    DatasetFileError,
    SpecError,
    generate_synth,
    load_dataset,
    normalize,
    save_dataset,
    split_train_test,
    to_frequency,
)
from .nets import Student, Teacher
from .trainer import (
    ConfigError,
    TrainerConfig,
    TrainingError,
    evaluate,
    predict_logits,
    read_metrics_csv,
    restore_state,
    run_training,
)

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_IO = 0, 2, 3, 4
OUTPUT_ENV = "CAT_UDA_OUTPUT"
SPLITS = ("source_train", "source_test", "target_train", "target_test")


def output_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ENV, "runs"))


def data_dir(cfg: ExperimentConfig, out: Path) -> Path:
    return Path(cfg.data.data_dir) if cfg.data.data_dir else out / cfg.data.task / "data"


# -- generate --------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.data.data_seed = args.seed
    target = data_dir(cfg, output_root(args.out))
    target.mkdir(parents=True, exist_ok=True)
    for which in ("source", "target"):
        ds = generate_synth(cfg.data.domain(which), cfg.data.n_per_class, cfg.data.data_seed)
        if cfg.data.representation == "frequency":
            ds = to_frequency(ds)
        train, test = split_train_test(normalize(ds), cfg.data.train_fraction, cfg.data.data_seed)
        save_dataset(train, target / f"{which}_train.bin")
        save_dataset(test, target / f"{which}_test.bin")
    print(f"wrote {', '.join(s + '.bin' for s in SPLITS)} to {target}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------

def _load_splits(directory: Path) -> dict:
    out = {}
    for name in SPLITS:
        path = directory / f"{name}.bin"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run `generate` first")
        out[name] = load_dataset(path, domain_id=0 if name.startswith("source") else 1)
    return out


def run_dir_for(out: Path, cfg: ExperimentConfig, seed: int) -> Path:
    return out / cfg.data.task / cfg.method.name / f"seed{seed}"


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = output_root(args.out)
    seeds = [args.seed] if args.seed is not None else list(cfg.method.seeds)
    configs = {s: cfg.trainer_config(s) for s in seeds}
    splits = _load_splits(data_dir(cfg, out))
    for seed, tcfg in configs.items():
        run_dir = run_dir_for(out, cfg, seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        info = {"task": cfg.data.task, "method": cfg.method.name, "seed": seed, "trainer": tcfg.to_dict()}
        (run_dir / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True))

        def show(r, seed=seed):
            print(f"seed={seed} epoch={r.epoch} phase={r.phase} target_acc={r.target_test_acc:.4f} "
                  f"target_ece={r.target_ece:.4f} loss={r.total:.4f}", flush=True)

        run_training(tcfg, splits["source_train"], splits["source_test"], splits["target_train"],
                     splits["target_test"], run_dir=run_dir, log=None if args.quiet else show)
        print(f"finished {run_dir}")
    return EXIT_OK


# -- evaluate ------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    meta = ckpt.metadata
    tcfg = TrainerConfig.from_dict(meta["config"])
    state = restore_state(ckpt, tcfg)
    model: Student | Teacher = state.student
    if args.model == "teacher":
        if state.teacher is None:
            raise ConfigError("checkpoint has no teacher (training stopped before the teacher-student phase)")
        model = state.teacher
    elif args.model == "auto" and state.teacher is not None:
        model = state.teacher
    ds = load_dataset(args.data)
    calibrator = state.calibrator if not args.uncalibrated else cal.CalibratorParams()
    acc, report = evaluate(model, ds, calibrator, tcfg.n_bins)
    print(f"accuracy={acc:.6f} ece={report.ece:.6f} n={len(ds)} calibrator={calibrator.kind}")
    if args.out:
        preds = cal.apply_calibrator(predict_logits(model, ds.samples), calibrator, ds.labels)
        cal.write_reliability_csv(args.out, cal.reliability_rows(preds, tcfg.n_bins))
    return EXIT_OK


# -- report -----------------------------------------------------------------------------

def average_ranks(scores: dict[str, float]) -> dict[str, float]:
    """Rank 1 for the highest score; tied methods share the mean of their ranks."""
    ordered = sorted(scores, key=lambda m: -scores[m])
    ranks = {}
    i = 0
    while i < len(ordered):
        j = i
        while j + 1 < len(ordered) and scores[ordered[j + 1]] == scores[ordered[i]]:
            j += 1
        for m in ordered[i:j + 1]:
            ranks[m] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def collect_runs(roots) -> list[dict]:
    runs = []
    for root in roots:
        for info_path in sorted(Path(root).rglob("run_info.json")):
            metrics = info_path.parent / "metrics.csv"
            if not metrics.exists():
                continue
            info = json.loads(info_path.read_text())
            rows = read_metrics_csv(metrics)
            if not rows:
                continue
            last = rows[-1]
            runs.append({"task": info["task"], "method": info["method"], "seed": info["seed"],
                         "target_acc": last["target_test_acc"], "target_ece": last["target_ece"]})
    return runs


def aggregate(runs: list[dict]) -> dict:
    tasks = sorted({r["task"] for r in runs})
    methods = sorted({r["method"] for r in runs})
    seeds = sorted({r["seed"] for r in runs})
    cells = defaultdict(list)
    for r in runs:
        cells[(r["task"], r["method"])].append(r)
    present = {(r["task"], r["method"], r["seed"]) for r in runs}
    missing = [(t, m, s) for t in tasks for m in methods for s in seeds if (t, m, s) not in present]
    per_task = {}
    for (t, m), rs in cells.items():
        per_task[(t, m)] = {"acc": float(np.mean([r["target_acc"] for r in rs])),
                            "ece": float(np.mean([r["target_ece"] for r in rs])), "n": len(rs)}
    ranks = defaultdict(list)
    for t in tasks:
        scores = {m: per_task[(t, m)]["acc"] for m in methods if (t, m) in per_task}
        for m, rk in average_ranks(scores).items():
            ranks[m].append(rk)
    summary = {}
    for m in methods:
        accs = [per_task[(t, m)]["acc"] for t in tasks if (t, m) in per_task]
        eces = [per_task[(t, m)]["ece"] for t in tasks if (t, m) in per_task]
        summary[m] = {"avg_acc": float(np.mean(accs)), "avg_ece": float(np.mean(eces)),
                      "avg_rank": float(np.mean(ranks[m]))}
    return {"tasks": tasks, "methods": methods, "per_task": per_task, "summary": summary, "missing": missing}


def write_report_csv(path, report: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["method"]
        for t in report["tasks"]:
            header += [f"{t}_acc", f"{t}_ece"]
        w.writerow(header + ["avg_acc", "avg_ece", "avg_rank"])
        for m in report["methods"]:
            row = [m]
            for t in report["tasks"]:
                cell = report["per_task"].get((t, m))
                row += ["", ""] if cell is None else [repr(cell["acc"]), repr(cell["ece"])]
            s = report["summary"][m]
            w.writerow(row + [repr(s["avg_acc"]), repr(s["avg_ece"]), repr(s["avg_rank"])])


def format_table(report: dict) -> str:
    cols = [f"{t} acc/ece" for t in report["tasks"]] + ["avg acc", "avg ece", "avg rank"]
    width = max([len(m) for m in report["methods"]] + [6])
    lines = ["method".ljust(width) + "  " + "  ".join(c.rjust(14) for c in cols)]
    for m in report["methods"]:
        cells = []
        for t in report["tasks"]:
            c = report["per_task"].get((t, m))
            cells.append("-" if c is None else f"{100 * c['acc']:.2f}/{100 * c['ece']:.2f}")
        s = report["summary"][m]
        cells += [f"{100 * s['avg_acc']:.2f}", f"{100 * s['avg_ece']:.2f}", f"{s['avg_rank']:.2f}"]
        lines.append(m.ljust(width) + "  " + "  ".join(c.rjust(14) for c in cells))
    return "\n".join(lines)


def cmd_report(args) -> int:
    runs = collect_runs(args.run_dirs)
    if not runs:
        raise FileNotFoundError("no completed runs (run_info.json + metrics.csv) under the given directories")
    report = aggregate(runs)
    if report["missing"]:
        listed = ", ".join(f"{t}/{m}/seed{s}" for t, m, s in report["missing"])
        warnings.warn(f"missing runs, aggregating over present cells only: {listed}")
        print(f"warning: missing runs: {listed}", file=sys.stderr)
    out = Path(args.out) if args.out else output_root(None) / "report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(out, report)
    print(format_table(report))
    print(f"wrote {out}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cat-uda", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic source/target train/test dataset files")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, help="override data.data_seed")
    g.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or ./runs)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one method for each configured seed")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="train only this seed")
    t.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or ./runs)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="accuracy and ECE of a checkpoint on a dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--model", choices=("auto", "student", "teacher"), default="auto")
    e.add_argument("--uncalibrated", action="store_true")
    e.add_argument("--out", help="write reliability bins to this CSV")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="aggregate finished runs into a table")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", help="report CSV path")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, CheckpointError, DatasetFileError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
