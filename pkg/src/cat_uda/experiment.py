"""Method roster and the multi-seed synthetic transfer experiment.

Methods that share an initial stretch of training are forked from a common
checkpoint instead of being retrained: every method starts with the same
source-only phase, and calibrated and uncalibrated teachers coincide until
calibration switches on.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SignalDataset, SynthDomainSpec, generate_synth, normalize, split_train_test, to_frequency
from .trainer import TrainerConfig, read_metrics_csv, run_training, shares_prefix

CALIBRATED = {
    "cat-tempscaling": "temperature",
    "cat-cpcs": "cpcs",
    "cat-vectorscaling": "vector",
    "cat-matrixscaling": "matrix",
}
METHODS = ("source-only", "dann", "dann-star", "at", "at-star", *CALIBRATED)


def method_config(method: str, base: TrainerConfig, mcc: bool | None = None, sdat: bool | None = None) -> TrainerConfig:
    """Gate the phases of ``base`` for ``method``; ``-star`` and ``cat-*`` methods enable MCC + SDAT.

    ``mcc`` / ``sdat`` override the roster default when given.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    star = method.endswith("-star") or method in CALIBRATED
    total = base.total_epochs
    changes = {
        "mcc_enabled": star if mcc is None else mcc,
        "sdat_enabled": star if sdat is None else sdat,
    }
    if method == "source-only":
        changes.update(t_da=total, t_pl=total, t_cal=total, calibrator_kind="identity")
    elif method.startswith("dann"):
        changes.update(t_pl=total, t_cal=total, calibrator_kind="identity")
    elif method.startswith("at"):
        changes.update(calibrator_kind="identity")
    else:
        changes.update(calibrator_kind=CALIBRATED[method])
    return dataclasses.replace(base, **changes)


@dataclass
class TransferData:
    source_train: SignalDataset
    source_test: SignalDataset
    target_train: SignalDataset
    target_test: SignalDataset


def prepare_domain(spec: SynthDomainSpec, n_per_class: int, seed: int, representation: str,
                   fraction: float = 0.8) -> tuple[SignalDataset, SignalDataset]:
    ds = generate_synth(spec, n_per_class, seed)
    if representation == "frequency":
        ds = to_frequency(ds)
    return split_train_test(normalize(ds), fraction, seed)


# Single tones a factor 3 apart: a 1.4x speed change moves every tone towards
# the next class without crossing the geometric midpoint (sqrt(3) ~ 1.73), so a
# source model transfers partially and feature alignment has room to help.
# The default harmonic set instead maps class k onto class k + 1.
FIXTURE_TONES = (4.0, 12.0, 36.0, 108.0, 324.0)
FIXTURE_NOISE = 2.0


def fixture_domain(speed: float, domain_id: int) -> SynthDomainSpec:
    return SynthDomainSpec(fundamentals=FIXTURE_TONES, harmonic_weights=((1.0,),) * len(FIXTURE_TONES),
                           speed_factor=speed, noise_sigma=FIXTURE_NOISE, domain_id=domain_id)


@dataclass
class TransferFixture:
    """A pinned two-domain synthetic task and its shortened training schedule.

    Phases are the full-length schedule scaled by 1/5. The EMA rate is scaled
    too: at ~13 iterations per epoch, 0.999 would leave the teacher close to
    its initial copy for the whole run.
    """

    source: SynthDomainSpec = field(default_factory=lambda: fixture_domain(1.0, 0))
    target: SynthDomainSpec = field(default_factory=lambda: fixture_domain(1.4, 1))
    n_per_class: int = 200
    representation: str = "time"
    data_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    trainer: TrainerConfig = field(default_factory=lambda: TrainerConfig(
        total_epochs=60, batch_size=64, t_da=10, t_pl=10, t_cal=30, lr_drop_epochs=(30, 50), ema_alpha=0.99,
    ))
    methods: tuple[str, ...] = ("source-only", "dann", "at", "cat-tempscaling")
    mcc: bool = False
    sdat: bool = False

    def data(self) -> TransferData:
        s_tr, s_te = prepare_domain(self.source, self.n_per_class, self.data_seed, self.representation)
        t_tr, t_te = prepare_domain(self.target, self.n_per_class, self.data_seed, self.representation)
        return TransferData(s_tr, s_te, t_tr, t_te)

    def config(self, method: str, seed: int) -> TrainerConfig:
        base = dataclasses.replace(self.trainer, seed=seed)
        return method_config(method, base, self.mcc, self.sdat)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trainer"] = self.trainer.to_dict()
        return d

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def fork_epoch(parent: TrainerConfig, child: TrainerConfig) -> int:
    """Latest epoch boundary up to which ``child`` can reuse ``parent``'s trajectory."""
    for e in range(min(parent.total_epochs, child.total_epochs), 0, -1):
        if not shares_prefix(parent, child, e):
            return e
    return 0


def plan_runs(fixture: TransferFixture, seed: int) -> list[tuple[str, str | None, int]]:
    """Order runs so each forks from the earlier run it shares most with: (method, parent, fork epoch)."""
    configs = {m: fixture.config(m, seed) for m in fixture.methods}
    # an uncalibrated teacher run shares the longest prefix with everything else, so it goes first
    roots = [m for m in fixture.methods
             if configs[m].calibrator_kind == "identity" and configs[m].t_pl < configs[m].total_epochs]
    order = roots[:1] + [m for m in fixture.methods if m not in roots[:1]]
    plan = []
    for i, m in enumerate(order):
        best = (None, 0)
        for parent in order[:i]:
            e = fork_epoch(configs[parent], configs[m])
            if e > best[1]:
                best = (parent, e)
        plan.append((m, best[0], best[1]))
    return plan


def run_transfer_experiment(fixture: TransferFixture, out_root, log=print) -> dict:
    """Train every (method, seed) cell, forking shared prefixes; returns the summary written to results.json."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    data = fixture.data()
    t_start = time.perf_counter()
    cells = {}
    for seed in fixture.seeds:
        plan = plan_runs(fixture, seed)
        fork_points: dict[str, set[int]] = {}
        for _, parent, epoch in plan:
            if parent is not None and epoch > 0:
                fork_points.setdefault(parent, set()).add(epoch)
        for method, parent, epoch in plan:
            cfg = dataclasses.replace(fixture.config(method, seed),
                                      checkpoint_epochs=tuple(sorted(fork_points.get(method, ()))))
            run_dir = out_root / method / f"seed{seed}"
            resume = None
            if parent is not None and epoch > 0:
                resume = out_root / parent / f"seed{seed}" / f"checkpoint_epoch{epoch:04d}.ckpt"
            t0 = time.perf_counter()
            result = run_training(cfg, data.source_train, data.source_test, data.target_train, data.target_test,
                                  run_dir=run_dir, resume_from=resume)
            last = result.history[-1]
            cells[(method, seed)] = {"target_acc": last.target_test_acc, "target_ece": last.target_ece,
                                     "source_acc": last.source_test_acc, "source_ece": last.source_ece}
            if log:
                log(f"{method:>16s} seed={seed} fork={parent}@{epoch} target_acc={last.target_test_acc:.4f} "
                    f"target_ece={last.target_ece:.4f} ({time.perf_counter() - t0:.0f}s)")
    elapsed = time.perf_counter() - t_start
    summary = summarize(cells, fixture)
    summary["seconds"] = elapsed
    summary["fixture"] = fixture.to_dict()
    (out_root / "results.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def summarize(cells: dict, fixture: TransferFixture) -> dict:
    out = {"methods": {}, "cells": {f"{m}/seed{s}": v for (m, s), v in sorted(cells.items())}}
    for m in fixture.methods:
        rows = [cells[(m, s)] for s in fixture.seeds if (m, s) in cells]
        out["methods"][m] = {
            "target_acc_mean": float(np.mean([r["target_acc"] for r in rows])),
            "target_ece_mean": float(np.mean([r["target_ece"] for r in rows])),
            "n_seeds": len(rows),
        }
    return out


def summary_from_run_dirs(out_root, fixture: TransferFixture) -> dict:
    """Rebuild the summary from the metrics.csv files of a finished experiment."""
    cells = {}
    for m in fixture.methods:
        for s in fixture.seeds:
            path = Path(out_root) / m / f"seed{s}" / "metrics.csv"
            if path.exists():
                last = read_metrics_csv(path)[-1]
                cells[(m, s)] = {"target_acc": last["target_test_acc"], "target_ece": last["target_ece"],
                                 "source_acc": last["source_test_acc"], "source_ece": last["source_ece"]}
    return summarize(cells, fixture)
