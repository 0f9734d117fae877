"""1D-CNN encoder, classification head, domain classifier and the EMA teacher."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad


class Module:
    """Tiny torch-like container: parameters, buffers, train/eval flag."""

    training = True

    def _children(self):
        return [(k, v) for k, v in vars(self).items() if isinstance(v, Module)]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k, v in vars(self).items():
            if isinstance(v, Tensor):
                out[prefix + k] = v
        for k, child in self._children():
            out.update(child.named_parameters(prefix + k + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for k, v in vars(self).items():
            if isinstance(v, np.ndarray):
                out[prefix + k] = v
        for k, child in self._children():
            out.update(child.named_buffers(prefix + k + "."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=T.DTYPE)
        for k, buf in buffers.items():
            buf[...] = state[k]

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (n_out, n_in), n_in)
        self.bias = _uniform(rng, (n_out,), n_in)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (c_out, c_in, kernel), c_in * kernel)
        self.bias = _uniform(rng, (c_out,), c_in * kernel)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias)


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Encoder(Module):
    """Conv stack + FC + bottleneck, mapping (B, 1, L) signals to (B, 256) features."""

    def __init__(self, rng: np.random.Generator, dropout: float = 0.5, feature_dim: int = 256):
        self.conv1 = Conv1d(1, 16, 15, rng)
        self.bn1 = BatchNorm1d(16)
        self.conv2 = Conv1d(16, 32, 3, rng)
        self.bn2 = BatchNorm1d(32)
        self.conv3 = Conv1d(32, 64, 3, rng)
        self.bn3 = BatchNorm1d(64)
        self.conv4 = Conv1d(64, 128, 3, rng)
        self.bn4 = BatchNorm1d(128)
        self.fc = Linear(128 * 4, 256, rng)
        self.bottleneck = Linear(256, feature_dim, rng)
        self.dropout = dropout
        self.feature_dim = feature_dim

    # smallest length that survives the unpadded convs, the pool and the 4-way adaptive pool
    MIN_LENGTH = 14 + 2 + 2 * (2 + 2 + 4)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[1] != 1:
            raise ValueError(f"encoder expects (batch, 1, length) input, got {x.shape}")
        if x.shape[2] < self.MIN_LENGTH:
            raise ValueError(f"input length {x.shape[2]} below minimum {self.MIN_LENGTH}")
        # internal layout is channel-last (B, L, C); C = 1 makes this a free reshape
        h = x.reshape(x.shape[0], x.shape[2], 1)
        h = T.relu(self.bn1(self.conv1(h)))
        h = T.relu(self.bn2(self.conv2(h)))
        h = T.max_pool1d(h, 2, 2)
        h = T.relu(self.bn3(self.conv3(h)))
        h = T.relu(self.bn4(self.conv4(h)))
        h = T.adaptive_max_pool1d(h, 4)
        h = h.reshape(h.shape[0], -1)
        h = T.dropout(T.relu(self.fc(h)), self.dropout, rng, self.training)
        h = T.dropout(T.relu(self.bottleneck(h)), self.dropout, rng, self.training)
        return h


class Classifier(Module):
    def __init__(self, n_classes: int, rng: np.random.Generator, feature_dim: int = 256):
        self.fc = Linear(feature_dim, n_classes, rng)
        self.n_classes = n_classes

    def __call__(self, features: Tensor) -> Tensor:
        return self.fc(features)


class DomainClassifier(Module):
    """256 -> 1024 -> 1024 -> 1 with sigmoid output (probability of source)."""

    def __init__(self, rng: np.random.Generator, feature_dim: int = 256, hidden: int = 1024, dropout: float = 0.5):
        self.fc1 = Linear(feature_dim, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, 1, rng)
        self.dropout = dropout

    def __call__(self, features: Tensor, lam: float, rng: np.random.Generator | None = None) -> Tensor:
        h = T.grl(features, lam)
        h = T.dropout(T.relu(self.fc1(h)), self.dropout, rng, self.training)
        h = T.dropout(T.relu(self.fc2(h)), self.dropout, rng, self.training)
        return T.sigmoid(self.out(h))


class Student(Module):
    def __init__(self, n_classes: int, rng: np.random.Generator, dropout: float = 0.5):
        self.encoder = Encoder(rng, dropout)
        self.classifier = Classifier(n_classes, rng)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        features = self.encoder(x, rng)
        return features, self.classifier(features)


def build_models(n_classes: int, seed: int, dropout: float = 0.5) -> tuple[Student, DomainClassifier]:
    """Student and discriminator, always drawn in the same order from one init stream."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
    student = Student(n_classes, rng, dropout)
    disc = DomainClassifier(rng, dropout=dropout)
    return student, disc


def student_forward(student: Student, batch, mode: str = "eval", rng=None) -> tuple[Tensor, Tensor]:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    student.train(mode == "train")
    return student(T.as_tensor(batch), rng)


def discriminate(disc: DomainClassifier, features: Tensor, lam: float, rng=None) -> Tensor:
    return disc(features, lam, rng)


class Teacher:
    """EMA copy of the student's encoder and classifier; never trained by gradient."""

    def __init__(self, student: Student, alpha: float = 0.999):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("ema alpha must lie in [0, 1]")
        n_classes = student.classifier.n_classes
        rng = np.random.default_rng(0)
        self.model = Student(n_classes, rng, student.encoder.dropout)
        self.model.load_state_dict(student.state_dict())
        for p in self.model.named_parameters().values():
            p.requires_grad = False
        self.model.eval()
        self.alpha = alpha

    @property
    def encoder(self) -> Encoder:
        return self.model.encoder

    @property
    def classifier(self) -> Classifier:
        return self.model.classifier

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.model.state_dict()

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.model.load_state_dict(state)
        for p in self.model.named_parameters().values():
            p.requires_grad = False

    def predict(self, batch) -> np.ndarray:
        """Evaluation-mode logits (no dropout, running BN statistics)."""
        self.model.eval()
        with no_grad():
            _, logits = self.model(T.as_tensor(batch))
        return logits.data

    def features(self, batch) -> np.ndarray:
        self.model.eval()
        with no_grad():
            return self.model.encoder(T.as_tensor(batch)).data


def ema_update(teacher: Teacher, student: Student, alpha: float | None = None) -> Teacher:
    """theta_t <- alpha * theta_t + (1 - alpha) * theta_s, BN running stats included."""
    alpha = teacher.alpha if alpha is None else alpha
    t_params, t_bufs = teacher.model.named_parameters(), teacher.model.named_buffers()
    s_params, s_bufs = student.named_parameters(), student.named_buffers()
    if set(t_params) != set(s_params) or set(t_bufs) != set(s_bufs):
        raise KeyError("teacher and student structures differ")
    for k, p in t_params.items():
        src = s_params[k].data
        if src.shape != p.shape:
            raise ValueError(f"shape mismatch for {k}")
        p.data = alpha * p.data + (1.0 - alpha) * src
    for k, buf in t_bufs.items():
        buf[...] = alpha * buf + (1.0 - alpha) * s_bufs[k]
    return teacher
