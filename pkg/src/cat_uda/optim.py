"""Adam, sharpness-aware steps and the epoch/progress schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter step counts: parameters that join late (the discriminator
    # before adversarial training) get their own bias correction
    steps: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("weight_decay must be >= 0 and eps > 0")


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
) -> AdamState:
    """In-place Adam update (L2 term added to the gradient, torch convention).

    Parameters whose gradient is ``None`` are left untouched, moments included.
    """
    for name, g in grads.items():
        if g is not None and name in params and np.shape(g) != params[name].shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter '{name}' {params[name].shape}")
    state.step_count += 1
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.steps[name] = 0
        t = state.steps[name] + 1
        state.steps[name] = t
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


@dataclass
class SamConfig:
    rho: float = 0.05
    enabled: bool = False

    def __post_init__(self):
        if self.enabled and self.rho <= 0:
            raise ValueError("SAM rho must be positive when enabled")


@dataclass
class SamInfo:
    task_loss: float
    full_loss: float
    perturbation_norm: float
    perturbed: bool


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray | None]:
    return {name: (None if p.grad is None else p.grad) for name, p in params.items()}


def zero_grads(params: Mapping[str, Tensor]):
    for p in params.values():
        p.grad = None


def _global_norm(arrays) -> float:
    arrays = list(arrays)
    top = max((float(np.max(np.abs(a))) for a in arrays if a.size), default=0.0)
    if top == 0.0 or not math.isfinite(top):
        return top
    # rescale first so tiny or huge gradients neither underflow nor overflow
    return top * math.sqrt(sum(float(np.sum((a / top) ** 2)) for a in arrays))


def sam_step(
    task_loss_fn: Callable[[], Tensor],
    full_loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    cfg: SamConfig,
    state: AdamState,
    perturb: Mapping[str, Tensor] | None = None,
    eps: float = 0.0,
) -> SamInfo:
    """One sharpness-aware update.

    The task-loss gradient defines an ascent direction of length ``rho`` over
    ``perturb`` (defaults to all ``params``); the full loss is differentiated
    at the perturbed point and Adam applies those gradients at the original
    weights. ``eps`` is added to the gradient norm in the denominator; the
    default 0 keeps the perturbation length exactly ``rho``.
    """
    perturb = params if perturb is None else perturb
    zero_grads(params)
    task = task_loss_fn()
    task.backward()
    g = {name: p.grad for name, p in perturb.items() if p.grad is not None}
    norm = _global_norm(g.values())

    saved = {}
    applied = 0.0
    if norm > 0.0:
        steps = {name: cfg.rho * (gi / (norm + eps)) for name, gi in g.items()}
        for name, step in steps.items():
            p = perturb[name]
            saved[name] = p.data
            p.data = p.data + step
        applied = _global_norm(steps.values())

    zero_grads(params)
    full = full_loss_fn()
    full.backward()
    grads = collect_grads(params)
    for name, data in saved.items():
        perturb[name].data = data
    adam_step(params, grads, state)
    zero_grads(params)
    return SamInfo(task.item(), full.item(), applied, norm > 0.0)


def lr_at_epoch(base_lr: float, epoch: int, drops: tuple[int, ...] = (150, 250), factor: float = 10.0) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    n = sum(1 for d in drops if epoch >= d)
    return base_lr / factor**n


def grl_coefficient(p: float) -> float:
    """Adversarial ramp 2 / (1 + exp(-10 p)) - 1, rising from 0 towards 1."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0
