"""Confidence, ECE / reliability bins and post-hoc logit calibrators.

Calibrators are fitted on a labelled source hold-out set and applied to
(teacher) logits: temperature, vector and matrix scaling, and CPCS
(temperature fitted on an importance-weighted Brier score).
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamState, adam_step
from .tensor import Tensor

KINDS = ("identity", "temperature", "vector", "matrix", "cpcs")
LOG_T_BOUNDS = (math.log(0.05), math.log(20.0))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass
class PredictionSet:
    logits: np.ndarray
    probs: np.ndarray
    confidences: np.ndarray
    predicted: np.ndarray
    labels: np.ndarray | None = None

    @classmethod
    def from_logits(cls, logits, labels=None) -> "PredictionSet":
        logits = np.asarray(logits, dtype=np.float64)
        probs = softmax(logits)
        predicted = probs.argmax(axis=1)
        conf = probs[np.arange(len(probs)), predicted]
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
        return cls(logits, probs, conf, predicted, labels)

    @property
    def accuracy(self) -> float:
        if self.labels is None:
            raise ValueError("accuracy needs labels")
        return float(np.mean(self.predicted == self.labels))


@dataclass
class CalibratorParams:
    kind: str = "identity"
    temperature: float = 1.0
    W: np.ndarray | None = None
    b: np.ndarray | None = None
    warning: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown calibrator kind {self.kind!r}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.kind == "vector" and self.W is not None:
            off = self.W - np.diag(np.diag(self.W))
            if np.any(off != 0):
                raise ValueError("vector scaling needs a diagonal W")

    def transform(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.kind in ("temperature", "cpcs"):
            return z / self.temperature
        if self.kind in ("vector", "matrix"):
            return z @ self.W.T + self.b
        return z


def apply_calibrator(z, params: CalibratorParams, labels=None) -> PredictionSet:
    if not params.temperature > 0:
        raise ValueError("temperature must be positive")
    return PredictionSet.from_logits(params.transform(z), labels)


# -- ECE ------------------------------------------------------------------

@dataclass
class EceReport:
    n_bins: int
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray
    ece: float
    n: int = field(default=0)

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.n_bins + 1) / self.n_bins


def bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin m (0-based) holds m/M < c <= (m+1)/M; c = 0 goes to the first bin."""
    upper = np.arange(1, n_bins + 1) / n_bins
    return np.clip(np.searchsorted(upper, conf, side="left"), 0, n_bins - 1)


def _ece_from_bins(counts, acc, conf, n: int) -> float:
    return math.fsum(counts[m] / n * abs(acc[m] - conf[m]) for m in range(len(counts)) if counts[m])


def compute_ece(preds: PredictionSet, n_bins: int = 10) -> EceReport:
    if preds.labels is None:
        raise ValueError("ECE needs labels")
    n = len(preds.confidences)
    if n == 0:
        raise ValueError("ECE of an empty prediction set is undefined")
    correct = preds.predicted == preds.labels
    idx = bin_index(preds.confidences, n_bins)
    counts = np.zeros(n_bins, dtype=np.int64)
    acc = np.zeros(n_bins)
    conf = np.zeros(n_bins)
    for m in range(n_bins):
        sel = idx == m
        k = int(sel.sum())
        counts[m] = k
        if k:
            acc[m] = int(correct[sel].sum()) / k
            conf[m] = math.fsum(preds.confidences[sel]) / k
    return EceReport(n_bins, counts, acc, conf, _ece_from_bins(counts, acc, conf, n), n)


def reliability_rows(preds: PredictionSet, n_bins: int = 10) -> list[tuple[float, float, int, float, float]]:
    rep = compute_ece(preds, n_bins)
    edges = rep.edges
    return [
        (float(edges[m]), float(edges[m + 1]), int(rep.counts[m]), float(rep.confidence[m]), float(rep.accuracy[m]))
        for m in range(n_bins)
    ]


RELIABILITY_HEADER = ["bin_low", "bin_high", "count", "avg_conf", "accuracy"]


def write_reliability_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RELIABILITY_HEADER)
        for lo, hi, count, avg_conf, acc in rows:
            w.writerow([repr(lo), repr(hi), count, repr(avg_conf), repr(acc)])


def read_reliability_csv(path) -> list[tuple[float, float, int, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != RELIABILITY_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(float(a), float(b), int(c), float(d), float(e)) for a, b, c, d, e in reader]


def ece_from_rows(rows) -> float:
    counts = [r[2] for r in rows]
    return _ece_from_bins(counts, [r[4] for r in rows], [r[3] for r in rows], sum(counts))


# -- objectives -------------------------------------------------------------

def nll(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def weighted_brier(probs, labels, weights=None) -> float:
    probs = np.asarray(probs)
    onehot = np.eye(probs.shape[1])[np.asarray(labels, dtype=np.int64)]
    per_sample = ((onehot - probs) ** 2).sum(axis=1)
    if weights is not None:
        per_sample = per_sample * weights
    return float(per_sample.mean())


@dataclass
class SearchResult:
    x: float
    fx: float
    converged: bool
    n_evals: int


def golden_section(f, lo: float, hi: float, tol: float = 1e-4, max_iter: int = 200) -> SearchResult:
    """Bracketed golden-section minimization; returns the best point evaluated."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    best = min((fc, c), (fd, d))
    n = 2
    while abs(b - a) > tol and n < max_iter:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
            best = min(best, (fc, c))
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
            best = min(best, (fd, d))
        n += 1
    converged = abs(b - a) <= tol and math.isfinite(best[0])
    return SearchResult(best[1], best[0], converged, n)


def _fit_scalar_temperature(objective, kind: str, tol: float) -> CalibratorParams:
    res = golden_section(lambda u: objective(math.exp(u)), *LOG_T_BOUNDS, tol=tol)
    base = objective(1.0)
    if not res.converged or not math.isfinite(res.fx):
        return CalibratorParams(kind, 1.0, warning="temperature search failed; using T=1")
    if base <= res.fx:
        # the optimum sits at T=1 to within the search tolerance
        return CalibratorParams(kind, 1.0)
    return CalibratorParams(kind, math.exp(res.x))


def fit_temperature(logits, labels, tol: float = 1e-4) -> CalibratorParams:
    """Temperature minimizing the NLL on a labelled hold-out set."""
    logits = np.asarray(logits, dtype=np.float64)
    return _fit_scalar_temperature(lambda t: nll(logits / t, labels), "temperature", tol)


def _fit_affine(logits, labels, diagonal: bool, lr: float, max_iter: int, tol: float) -> CalibratorParams:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    N, K = z.shape
    onehot = np.eye(K)[y]
    # start from the temperature solution, so the result never does worse than it
    inv_t = 1.0 / fit_temperature(z, y).temperature
    W = Tensor(np.full(K, inv_t) if diagonal else np.eye(K) * inv_t, requires_grad=True)
    b = Tensor(np.zeros(K), requires_grad=True)
    params = {"W": W, "b": b}
    state = AdamState(learning_rate=lr, weight_decay=0.0)

    def forward():
        return z * W.data + b.data if diagonal else z @ W.data.T + b.data

    prev = nll(forward(), y)
    best = (prev, W.data.copy(), b.data.copy())
    converged = False
    for _ in range(max_iter):
        f = forward()
        G = (softmax(f) - onehot) / N
        gW = (G * z).sum(axis=0) if diagonal else G.T @ z
        adam_step(params, {"W": gW, "b": G.sum(axis=0)}, state)
        cur = nll(forward(), y)
        if cur < best[0]:
            best = (cur, W.data.copy(), b.data.copy())
        if abs(prev - cur) < tol:
            converged = True
            break
        prev = cur
    Wb = np.diag(best[1]) if diagonal else best[1]
    kind = "vector" if diagonal else "matrix"
    warning = None if converged else f"{kind} scaling did not converge in {max_iter} iterations"
    return CalibratorParams(kind, 1.0, Wb, best[2], warning)


def fit_vector_scaling(logits, labels, lr: float = 0.01, max_iter: int = 2000, tol: float = 1e-7) -> CalibratorParams:
    return _fit_affine(logits, labels, True, lr, max_iter, tol)


def fit_matrix_scaling(logits, labels, lr: float = 0.01, max_iter: int = 2000, tol: float = 1e-7) -> CalibratorParams:
    return _fit_affine(logits, labels, False, lr, max_iter, tol)


# -- CPCS -----------------------------------------------------------------

@dataclass
class DomainDiscriminator:
    """Logistic regression on standardized features; outputs P(target | x)."""

    weight: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    keep: np.ndarray

    def prob_target(self, features) -> np.ndarray:
        x = (np.asarray(features)[:, self.keep] - self.mean) / self.std
        s = x @ self.weight + self.bias
        return 0.5 * (1.0 + np.tanh(0.5 * s))


def fit_domain_discriminator(
    source_features, target_features, max_iter: int = 1000, l2: float = 1e-2, tol: float = 1e-8
) -> DomainDiscriminator | None:
    """Full-batch gradient descent (step 1/L) on the L2-regularized logistic loss.

    Returns ``None`` when no feature has any variance.
    """
    xs = np.asarray(source_features, dtype=np.float64)
    xt = np.asarray(target_features, dtype=np.float64)
    X = np.concatenate([xs, xt])
    y = np.concatenate([np.zeros(len(xs)), np.ones(len(xt))])
    std = X.std(axis=0)
    keep = std > 1e-12
    if not keep.any():
        return None
    mean = X[:, keep].mean(axis=0)
    std = std[keep]
    Xn = (X[:, keep] - mean) / std
    n, d = Xn.shape
    # Lipschitz constant of the gradient: 0.25 * lambda_max(X^T X / n) + l2 (bias column included)
    Xa = np.hstack([Xn, np.ones((n, 1))])
    lip = 0.25 * np.linalg.eigvalsh(Xa.T @ Xa / n)[-1] + l2
    step = 1.0 / lip
    theta = np.zeros(d + 1)
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    for _ in range(max_iter):
        p = 0.5 * (1.0 + np.tanh(0.5 * (Xa @ theta)))
        grad = Xa.T @ (p - y) / n + reg * theta
        theta -= step * grad
        if np.max(np.abs(grad)) < tol:
            break
    return DomainDiscriminator(theta[:-1], float(theta[-1]), mean, std, keep)


def importance_weights(prob_target, clip_eps: float = 1e-3) -> np.ndarray:
    """w = d / (1 - d) with d clipped to [eps, 1 - eps], normalised to mean 1."""
    d = np.clip(np.asarray(prob_target, dtype=np.float64), clip_eps, 1.0 - clip_eps)
    w = d / (1.0 - d)
    return w / w.mean()


def fit_weighted_brier_temperature(logits, labels, weights=None, tol: float = 1e-4) -> CalibratorParams:
    logits = np.asarray(logits, dtype=np.float64)
    return _fit_scalar_temperature(
        lambda t: weighted_brier(softmax(logits / t), labels, weights), "cpcs", tol
    )


def fit_cpcs(
    logits,
    labels,
    test_features,
    source_train_features,
    target_train_features,
    clip_eps: float = 1e-3,
    tol: float = 1e-4,
) -> CalibratorParams:
    """Temperature on the importance-weighted Brier score of the source hold-out set.

    Weights come from a logistic domain discriminator fitted on encoder
    features of the source and target training sets.
    """
    disc = fit_domain_discriminator(source_train_features, target_train_features)
    warning = None
    if disc is None:
        weights = np.ones(len(labels))
        warning = "domain features have no variance; using uniform importance weights"
        warnings.warn(warning)
    else:
        weights = importance_weights(disc.prob_target(test_features), clip_eps)
    params = fit_weighted_brier_temperature(logits, labels, weights, tol)
    if warning:
        params.warning = warning
    return params


def save_calibrator_arrays(params: CalibratorParams) -> dict[str, np.ndarray]:
    out = {"calibrator.temperature": np.array([params.temperature])}
    if params.W is not None:
        out["calibrator.W"] = np.asarray(params.W, dtype=np.float64)
        out["calibrator.b"] = np.asarray(params.b, dtype=np.float64)
    return out


def load_calibrator_arrays(kind: str, arrays: dict[str, np.ndarray]) -> CalibratorParams:
    return CalibratorParams(
        kind,
        float(arrays["calibrator.temperature"][0]),
        arrays.get("calibrator.W"),
        arrays.get("calibrator.b"),
    )


def reliability_path(run_dir, domain: str) -> Path:
    return Path(run_dir) / f"reliability_{domain}.csv"
