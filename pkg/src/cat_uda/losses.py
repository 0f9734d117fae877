"""Loss terms of the CAT objective and their equally weighted combination."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-12


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n_rows:
        raise ValueError(f"{labels.shape[0]} labels for {n_rows} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """-(1/B) sum_i log p[i, y_i]; probabilities are clamped at 1e-12 before the log."""
    probs = T.as_tensor(probs)
    B = probs.shape[0]
    if B == 0:
        return Tensor(0.0)
    labels = _check_labels(labels, B, probs.shape[1])
    picked = probs[np.arange(B), labels]
    if T.is_checked() and np.any(picked.data < EPS):
        warnings.warn(f"cross_entropy: {int(np.sum(picked.data < EPS))} true-label probabilities clamped at {EPS}")
    return -T.mean(T.log(T.clamp(picked, EPS, None)))


def pseudo_label_loss(probs: Tensor, pseudo_labels) -> Tensor:
    """Cross-entropy on the selected target samples; zero for an empty selection."""
    return cross_entropy(probs, pseudo_labels)


def domain_bce(d_src: Tensor, d_tgt: Tensor) -> Tensor:
    """Discriminator loss with source labelled 1 and target labelled 0."""
    d_src, d_tgt = T.as_tensor(d_src), T.as_tensor(d_tgt)
    if d_src.size == 0 or d_tgt.size == 0:
        raise ValueError("domain_bce needs non-empty source and target batches")
    src = T.log(T.clamp(d_src, EPS, 1.0 - EPS))
    tgt = T.log(T.clamp(1.0 - d_tgt, EPS, 1.0 - EPS))
    return -T.mean(src) - T.mean(tgt)


def mcc_loss(logits: Tensor, temperature: float = 2.5) -> Tensor:
    """Minimum class confusion on target logits.

    Certainty-weighted class correlation C = Y^T W Y of the tempered
    softmax Y, row normalised, off-diagonal mass averaged over classes.
    Rows with no mass at all count as zero confusion.
    """
    logits = T.as_tensor(logits)
    B, K = logits.shape
    if B < 1:
        raise ValueError("mcc_loss needs at least one sample")
    scaled = logits * (1.0 / temperature)
    probs = T.softmax(scaled, axis=1)
    entropy = -T.tsum(probs * T.log_softmax(scaled, axis=1), axis=1)
    certainty = 1.0 + T.exp(-entropy)
    weights = certainty * (B / certainty.sum())
    corr = T.matmul((probs * weights.reshape(B, 1)).T, probs)
    rows = corr.sum(axis=1, keepdims=True)
    # a class nobody predicts has an all-zero row; it adds no confusion
    corr = corr / (rows + (rows.data == 0.0).astype(np.float64))
    off_diag = corr.sum() - T.tsum(corr * np.eye(K))
    return off_diag * (1.0 / K)


@dataclass
class LossBundle:
    l_c: float = 0.0
    l_pl: float = 0.0
    l_dc: float = 0.0
    l_mcc: float = 0.0
    total: float = 0.0


def cat_total_loss(terms: dict[str, Tensor], flags: dict[str, bool]) -> tuple[Tensor, LossBundle]:
    """Sum the active loss terms.

    The graph carries ``l_c + l_dc + l_pl + l_mcc``: the discriminator descends
    on ``l_dc`` while the gradient reversal in front of it hands the encoder
    ``-lambda * grad l_dc``. ``LossBundle.total`` reports the objective value
    ``l_c - l_dc + l_pl + l_mcc``.
    """
    graph = None
    values = {}
    for name in ("l_c", "l_dc", "l_pl", "l_mcc"):
        if not flags.get(name, False) or terms.get(name) is None:
            values[name] = 0.0
            continue
        term = terms[name]
        values[name] = term.item()
        graph = term if graph is None else graph + term
    if graph is None:
        graph = Tensor(0.0)
    bundle = LossBundle(
        l_c=values["l_c"], l_pl=values["l_pl"], l_dc=values["l_dc"], l_mcc=values["l_mcc"],
        total=values["l_c"] - values["l_dc"] + values["l_pl"] + values["l_mcc"],
    )
    return graph, bundle
