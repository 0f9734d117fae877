"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op builds a node only when gradient tracking is on and one of its
inputs requires a gradient. ``Tensor.backward`` walks the graph in reverse
topological order and accumulates into ``.grad`` of leaf tensors.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_GRAD_ENABLED = True
_CHECKED = False


class GraphError(RuntimeError):
    """Structural problem in the computation graph."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared while running in checked mode."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite value in {where} of op '{op}'")
        self.op = op
        self.where = where


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise ``NonFiniteError`` on the first op producing NaN/Inf."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = enabled
    try:
        yield
    finally:
        _CHECKED = prev


def is_checked() -> bool:
    return _CHECKED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    # -- reverse pass -----------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.size != 1:
                raise GraphError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise GraphError(f"gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                raise GraphError(f"op '{node.op}' has no backward rule")
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if _CHECKED and not np.all(np.isfinite(pg)):
                    raise NonFiniteError(node.op, "backward")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        st = state.get(key)
        if st == 2:
            continue
        if st == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            pst = state.get(id(parent))
            if pst == 1:
                raise GraphError("cycle detected in computation graph")
            if pst is None and parent.requires_grad:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; the gradient is passed only where the input was inside."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


# -- reductions and shape -----------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- network layers -----------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, backward, "linear")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid (unpadded) stride-1 convolution in channel-last layout.

    x: (B, L, C), weight: (O, C, k), output (B, L - k + 1, O).
    """
    B, L, C = x.shape
    O, Cw, k = weight.shape
    if Cw != C:
        raise ValueError(f"conv1d expects {Cw} input channels, got {C}")
    Lo = L - k + 1
    if Lo < 1:
        raise ValueError(f"conv1d input length {L} shorter than kernel {k}")
    # im2col rows are (b, position), columns (tap, channel); one copy
    cols = sliding_window_view(x.data, k, axis=1).transpose(0, 1, 3, 2).reshape(B * Lo, k * C)
    wmat = weight.data.transpose(2, 1, 0).reshape(k * C, O)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Lo, O)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(B * Lo, O)
        gw = None
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(k, C, O).transpose(2, 1, 0)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(B, Lo, k, C)
            gx = np.zeros((B, L, C), dtype=DTYPE)
            for j in range(k):
                gx[:, j : j + Lo, :] += dcols[:, :, j, :]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward, "conv1d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """BatchNorm with per-channel statistics; x is (..., C), channel last.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance); evaluation mode uses the buffers.
    """
    C = x.shape[-1]
    flat = x.data.reshape(-1, C)
    n = flat.shape[0]
    if training:
        if n < 2:
            raise ValueError("batch_norm in training mode needs more than one value per channel")
        ones = np.ones(n, dtype=DTYPE)
        mu = (ones @ flat) / n
        # one-pass moments; float64 leaves ample headroom at activation scale
        var = np.einsum("ij,ij->j", flat, flat) / n - mu * mu
        var = np.maximum(var, 0.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv_std
    out = flat * scale
    out += beta.data - mu * scale
    out = out.reshape(x.shape)

    def backward(g):
        g = g.reshape(-1, C)
        sg = np.ones(n, dtype=DTYPE) @ g
        sgx = np.einsum("ij,ij->j", g, flat)
        # sum of g * xhat per channel, without materialising xhat
        sgxhat = inv_std * (sgx - mu * sg)
        gx = None
        if x.requires_grad:
            gscale = gamma.data * inv_std
            if training:
                coef_x = -gscale * inv_std * sgxhat / n
                const = -gscale * sg / n - mu * coef_x
                gx = g * gscale
                gx += flat * coef_x
                gx += const
            else:
                gx = g * gscale
            gx = gx.reshape(x.shape)
        return gx, sgxhat, sg

    return _make(out, (x, gamma, beta), backward, "batch_norm")


def max_pool1d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling along the length axis of (B, L, C)."""
    if kernel != stride:
        raise NotImplementedError("only non-overlapping pooling is supported")
    B, L, C = x.shape
    Lo = L // kernel
    win = x.data[:, : Lo * kernel, :].reshape(B, Lo, kernel, C)
    if kernel == 2:
        first = win[:, :, 0, :] >= win[:, :, 1, :]
        out = np.where(first, win[:, :, 0, :], win[:, :, 1, :])
        arg = (~first).astype(np.int64)
    else:
        arg = win.argmax(axis=2)
        out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        gwin = gx[:, : Lo * kernel, :].reshape(B, Lo, kernel, C)
        for j in range(kernel):
            gwin[:, :, j, :] = g * (arg == j)
        return (gx,)

    return _make(out, (x,), backward, "max_pool1d")


def adaptive_windows(length: int, n_out: int) -> list[tuple[int, int]]:
    """Contiguous windows [floor(i*L/n), ceil((i+1)*L/n)) covering the length axis."""
    return [((i * length) // n_out, -(-((i + 1) * length) // n_out)) for i in range(n_out)]


def adaptive_max_pool1d(x: Tensor, n_out: int) -> Tensor:
    """Max over ``n_out`` near-equal windows of the length axis: (B, L, C) -> (B, n_out, C)."""
    B, L, C = x.shape
    if L < n_out:
        raise ValueError(f"adaptive_max_pool1d needs length >= {n_out}, got {L}")
    windows = adaptive_windows(L, n_out)
    idx = np.empty((B, n_out, C), dtype=np.int64)
    for i, (s, e) in enumerate(windows):
        idx[:, i, :] = s + x.data[:, s:e, :].argmax(axis=1)
    out = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        bi, ci = np.meshgrid(np.arange(B), np.arange(C), indexing="ij")
        # neighbouring windows may share a sample, so accumulate
        for i in range(n_out):
            np.add.at(gx, (bi, idx[:, i, :], ci), g[:, i, :])
        return (gx,)

    return _make(out, (x,), backward, "adaptive_max_pool1d")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def grl(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, ``-lam * upstream`` backward."""
    return _make(x.data.copy(), (x,), lambda g: (grl_backward(g, lam),), "grl")


def grl_backward(upstream: np.ndarray, lam: float) -> np.ndarray:
    return -lam * np.asarray(upstream, dtype=DTYPE)
