"""Synthetic domain-shift signals, FFT preprocessing, splitting, batching and dataset files.

Signals are sampled at ``sample_rate`` Hz over ``length`` points. With the
defaults (1024 Hz, 1024 points) a frequency in Hz is also its FFT bin.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

REPRESENTATIONS = ("time", "frequency")
MAGIC = b"CATSIGDS"
VERSION = 1
# magic, version, N, L, K, has_labels, representation
HEADER = struct.Struct("<8sIQQIBB")


class SpecError(ValueError):
    pass


class DatasetStateError(RuntimeError):
    pass


class DatasetFileError(ValueError):
    pass


@dataclass(frozen=True)
class SignalDataset:
    samples: np.ndarray
    labels: np.ndarray | None = None
    domain_id: int = 0
    representation: str = "time"
    seed: int = 0
    n_classes: int | None = None

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ValueError(f"samples must be (N, L), got shape {samples.shape}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != samples.shape[0]:
                raise ValueError(f"{labels.shape[0]} labels for {samples.shape[0]} samples")
            if labels.size and labels.min() < 0:
                raise ValueError("labels must be non-negative")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)
            if self.n_classes is None:
                object.__setattr__(self, "n_classes", int(labels.max()) + 1 if labels.size else 0)
            elif labels.size and labels.max() >= self.n_classes:
                raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def subset(self, idx) -> "SignalDataset":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return replace(self, samples=self.samples[idx], labels=labels)

    def without_labels(self) -> "SignalDataset":
        """Copy with labels dropped, used to keep target labels off the training path."""
        return replace(self, labels=None)

    def as_batch(self, idx=None) -> np.ndarray:
        x = self.samples if idx is None else self.samples[idx]
        return x.reshape(x.shape[0], 1, x.shape[1])


# -- synthetic benchmark -------------------------------------------------------

@dataclass
class SynthDomainSpec:
    """One operating condition: class tones scaled in frequency and amplitude."""

    fundamentals: tuple[float, ...] = (21.0, 34.0, 47.0, 61.0, 76.0)
    harmonic_weights: tuple[tuple[float, ...], ...] | None = None
    speed_factor: float = 1.0
    amplitude_factor: float = 1.0
    noise_sigma: float = 0.5
    length: int = 1024
    sample_rate: float = 1024.0
    domain_id: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.fundamentals)

    def weights(self) -> list[tuple[float, ...]]:
        if self.harmonic_weights is None:
            return [(1.0, 0.5, 0.25)] * self.n_classes
        return [tuple(w) for w in self.harmonic_weights]

    def validate(self):
        K = self.n_classes
        if K < 2:
            raise SpecError("need at least two classes")
        if self.speed_factor <= 0 or self.amplitude_factor <= 0:
            raise SpecError("speed_factor and amplitude_factor must be positive")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be non-negative")
        if self.length < 2 or self.sample_rate <= 0:
            raise SpecError("length must be >= 2 and sample_rate positive")
        if len(set(self.fundamentals)) != K or min(self.fundamentals) <= 0:
            raise SpecError("class fundamentals must be positive and pairwise distinct")
        weights = self.weights()
        if len(weights) != K:
            raise SpecError(f"{len(weights)} harmonic weight rows for {K} classes")
        nyquist = self.sample_rate / 2.0
        for k, (f, w) in enumerate(zip(self.fundamentals, weights)):
            top = len(w) * f * self.speed_factor
            if top >= nyquist:
                raise SpecError(
                    f"class {k}: highest harmonic {top:g} Hz reaches the Nyquist limit {nyquist:g} Hz"
                )


def generate_synth(spec: SynthDomainSpec, n_per_class: int, seed: int) -> SignalDataset:
    """Sum of harmonics with one random phase per sample plus white Gaussian noise."""
    spec.validate()
    if n_per_class < 1:
        raise SpecError("n_per_class must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, spec.domain_id, 0x5157]))
    t = np.arange(spec.length) / spec.sample_rate
    K = spec.n_classes
    samples = np.empty((K * n_per_class, spec.length))
    labels = np.repeat(np.arange(K), n_per_class)
    for k, (f, w) in enumerate(zip(spec.fundamentals, spec.weights())):
        phi = rng.uniform(0.0, 2.0 * np.pi, size=(n_per_class, 1))
        sig = np.zeros((n_per_class, spec.length))
        for h, wh in enumerate(w, start=1):
            sig += wh * np.sin(2.0 * np.pi * h * f * spec.speed_factor * t + phi)
        noise = rng.normal(0.0, spec.noise_sigma, size=sig.shape) if spec.noise_sigma else 0.0
        samples[k * n_per_class:(k + 1) * n_per_class] = spec.amplitude_factor * sig + noise
    return SignalDataset(samples, labels, spec.domain_id, "time", seed, K)


def to_frequency(ds: SignalDataset) -> SignalDataset:
    """Full-length FFT magnitude of every sample (length preserved)."""
    if ds.representation != "time":
        raise DatasetStateError("dataset is already in the frequency domain")
    mag = np.abs(np.fft.fft(ds.samples, axis=1))
    return replace(ds, samples=mag, representation="frequency")


def normalize(ds: SignalDataset, std_floor: float = 1e-8) -> SignalDataset:
    x = ds.samples
    mu = x.mean(axis=1, keepdims=True)
    sd = np.maximum(x.std(axis=1, keepdims=True), std_floor)
    return replace(ds, samples=(x - mu) / sd)


def split_train_test(ds: SignalDataset, fraction: float = 0.8, seed: int = 0) -> tuple[SignalDataset, SignalDataset]:
    """Seeded split; stratified by class when labels are present."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, ds.domain_id, 0x5911]))
    if ds.labels is None:
        perm = rng.permutation(len(ds))
        n_train = int(round(fraction * len(ds)))
        train_idx, test_idx = perm[:n_train], perm[n_train:]
    else:
        train_parts, test_parts = [], []
        for k in np.unique(ds.labels):
            idx = np.flatnonzero(ds.labels == k)
            if idx.size < 2:
                raise ValueError(f"class {k} has {idx.size} sample(s); stratified split needs at least 2")
            idx = rng.permutation(idx)
            n_train = min(max(int(round(fraction * idx.size)), 1), idx.size - 1)
            train_parts.append(idx[:n_train])
            test_parts.append(idx[n_train:])
        train_idx = np.sort(np.concatenate(train_parts))
        test_idx = np.sort(np.concatenate(test_parts))
    return ds.subset(train_idx), ds.subset(test_idx)


# -- batching --------------------------------------------------------------------

def epoch_permutation(n: int, seed: int, epoch: int, stream: int) -> np.ndarray:
    """Shuffle order that depends only on (seed, epoch, stream)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, stream]))
    return rng.permutation(n)


@dataclass
class PairedBatches:
    """Index batches for source and target; the shorter side restarts with a fresh shuffle."""

    n_source: int
    n_target: int
    batch_size: int
    seed: int
    epoch: int
    batches: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if self.n_source < 1 or self.n_target < 1:
            raise ValueError("source and target sets must be non-empty")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        n_iter = -(-max(self.n_source, self.n_target) // self.batch_size)
        src = _cycled(self.n_source, n_iter * self.batch_size, self.seed, self.epoch, 1)
        tgt = _cycled(self.n_target, n_iter * self.batch_size, self.seed, self.epoch, 2)
        longest = max(self.n_source, self.n_target)
        for i in range(n_iter):
            lo = i * self.batch_size
            hi = min(lo + self.batch_size, longest)
            self.batches.append((src[lo:hi], tgt[lo:hi]))

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


def _cycled(n: int, total: int, seed: int, epoch: int, stream: int) -> np.ndarray:
    parts = [epoch_permutation(n, seed, epoch, stream)]
    restart = 1
    while sum(len(p) for p in parts) < total:
        parts.append(epoch_permutation(n, seed, epoch, stream + 16 * restart))
        restart += 1
    return np.concatenate(parts)[:total]


def iterations_per_epoch(n_source: int, n_target: int, batch_size: int) -> int:
    return -(-max(n_source, n_target) // batch_size)


# -- files -------------------------------------------------------------------------

def save_dataset(ds: SignalDataset, path) -> None:
    n, length = ds.samples.shape
    k = ds.n_classes or 0
    rep = REPRESENTATIONS.index(ds.representation)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, length, k, int(ds.has_labels), rep))
        fh.write(ds.samples.astype("<f8").tobytes())
        if ds.has_labels:
            fh.write(ds.labels.astype("<i4").tobytes())


def load_dataset(path, domain_id: int = 0) -> SignalDataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise DatasetFileError(f"{path}: file too short for a dataset header")
    magic, version, n, length, k, has_labels, rep = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFileError(f"{path}: unsupported version {version}")
    if rep >= len(REPRESENTATIONS):
        raise DatasetFileError(f"{path}: bad representation code {rep}")
    expected = HEADER.size + 8 * n * length + (4 * n if has_labels else 0)
    if len(raw) != expected:
        raise DatasetFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = HEADER.size
    samples = np.frombuffer(raw, dtype="<f8", count=n * length, offset=off).reshape(n, length)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off + 8 * n * length).astype(np.int64)
    return SignalDataset(samples.astype(np.float64), labels, domain_id, REPRESENTATIONS[rep], 0, k or None)


def dataset_file_size(n: int, length: int, has_labels: bool) -> int:
    return HEADER.size + 8 * n * length + (4 * n if has_labels else 0)


def load_csv(path, domain_id: int = 0, has_labels: bool = True, representation: str = "time") -> SignalDataset:
    """Rows of ``label,v0,...,v{L-1}`` (or just the values when unlabelled); a header row is skipped."""
    with open(path) as fh:
        first = fh.readline()
    skip = 0
    try:
        [float(x) for x in first.strip().split(",")]
    except ValueError:
        skip = 1
    data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    if has_labels:
        labels = data[:, 0]
        if np.any(labels != np.round(labels)):
            raise ValueError(f"{path}: non-integer labels")
        return SignalDataset(data[:, 1:], labels.astype(np.int64), domain_id, representation)
    return SignalDataset(data, None, domain_id, representation)
