"""Class-wise adaptive confidence thresholds and pseudo-label selection."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


def warp(x):
    """M(x) = x / (2 - x): maps [0, 1] onto [0, 1], convex, M(0.5) = 1/3."""
    x = np.asarray(x, dtype=np.float64)
    return x / (2.0 - x)


@dataclass
class ThresholdState:
    tau: float
    sigma: np.ndarray
    beta: np.ndarray
    thresholds: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")

    @classmethod
    def fixed(cls, n_classes: int, tau: float) -> "ThresholdState":
        return cls(tau, np.zeros(n_classes, dtype=np.int64), np.ones(n_classes), np.full(n_classes, float(tau)))


def thresholds_from_counts(sigma, tau: float) -> ThresholdState:
    sigma = np.asarray(sigma, dtype=np.int64)
    top = sigma.max() if sigma.size else 0
    if top == 0:
        # nothing confident yet: keep the fixed threshold for every class
        return ThresholdState(tau, sigma, np.ones(sigma.shape), np.full(sigma.shape, float(tau)))
    beta = sigma / top
    return ThresholdState(tau, sigma, beta, warp(beta) * tau)


def update_thresholds(probs, tau: float = 0.9) -> ThresholdState:
    """Count per class the predictions with confidence >= tau and derive thresholds."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("update_thresholds needs a non-empty (N, K) probability matrix")
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    sigma = np.bincount(pred[conf >= tau], minlength=probs.shape[1])
    return thresholds_from_counts(sigma, tau)


@dataclass
class PseudoLabelBatch:
    indices: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray
    epoch: int = -1

    def __len__(self) -> int:
        return len(self.indices)


def select_pseudo_labels(probs, state: ThresholdState, epoch: int = -1) -> PseudoLabelBatch:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return PseudoLabelBatch(empty, empty.copy(), np.zeros(0), epoch)
    pred = probs.argmax(axis=1)
    conf = probs[np.arange(len(probs)), pred]
    keep = np.flatnonzero(conf >= state.thresholds[pred])
    return PseudoLabelBatch(keep, pred[keep], conf[keep], epoch)


def pseudo_label_accuracy(batch: PseudoLabelBatch, true_labels) -> float | None:
    """Share of selected pseudo-labels that match ground truth; None for an empty selection."""
    if len(batch) == 0:
        return None
    truth = np.asarray(true_labels)[batch.indices]
    return float(np.mean(batch.labels == truth))


@dataclass
class PseudoLabelEpochStats:
    epoch: int
    n_selected: int
    pl_accuracy: float | None
    mean_confidence: float | None
    thresholds: np.ndarray


def stats_header(n_classes: int) -> list[str]:
    return ["epoch", "n_selected", "pl_accuracy", "mean_confidence"] + [f"threshold_{k}" for k in range(n_classes)]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_stats_csv(path, rows: list[PseudoLabelEpochStats], n_classes: int):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(stats_header(n_classes))
        for r in rows:
            w.writerow([r.epoch, r.n_selected, _fmt(r.pl_accuracy), _fmt(r.mean_confidence)]
                       + [repr(float(t)) for t in r.thresholds])
