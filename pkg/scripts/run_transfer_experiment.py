#!/usr/bin/env python3
"""Run the pinned synthetic transfer experiment and store its summary.

Usage: python3 scripts/run_transfer_experiment.py [--out results/transfer] [--seeds 0 1 2]
"""
import argparse
import dataclasses
import json
import sys
from pathlib import Path

from cat_uda.experiment import TransferFixture, run_transfer_experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "results" / "transfer"))
    p.add_argument("--seeds", type=int, nargs="+", help="subset of seeds (the stored results need all five)")
    args = p.parse_args(argv)

    fixture = TransferFixture()
    if args.seeds:
        fixture = dataclasses.replace(fixture, seeds=tuple(args.seeds))
    summary = run_transfer_experiment(fixture, args.out, log=lambda s: print(s, flush=True))
    for method, row in summary["methods"].items():
        print(f"{method:>16s}  target_acc={row['target_acc_mean']:.4f}  target_ece={row['target_ece_mean']:.4f}"
              f"  seeds={row['n_seeds']}")
    print(f"total {summary['seconds'] / 60:.1f} min; summary in {Path(args.out) / 'results.json'}")
    print(json.dumps({m: r["target_acc_mean"] for m, r in summary["methods"].items()}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
