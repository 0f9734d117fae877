"""Little-endian binary checkpoints.

Layout::

    magic  b"CATCKPT\\0"          8 bytes
    version                       u32
    metadata length, JSON bytes   u64, utf-8
    tensor table                  u32 count, then per entry:
        name length, name         u16, utf-8
        ndim, shape               u8, u64 * ndim
        data                      f64 * prod(shape)
    optimizer section             u8 present flag; when set: JSON scalars
                                  (u64 length + bytes) and a second tensor table
                                  holding the moment buffers as ``m/<name>``, ``v/<name>``

Tensor names are prefixed by module: ``encoder.``, ``classifier.``,
``domain_classifier.``, ``teacher_encoder.``, ``teacher_classifier.``,
``calibrator.``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamState

MAGIC = b"CATCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    optimizer: AdamState | None = None

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _write_table(fh, tensors: dict[str, np.ndarray]):
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read_table(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    return out


def _write_json(fh, obj):
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)


def _read_json(fh):
    (n,) = struct.unpack("<Q", _read_exact(fh, 8))
    return json.loads(_read_exact(fh, n).decode("utf-8"))


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict | None = None,
                    optimizer: AdamState | None = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_json(buf, metadata or {})
    _write_table(buf, tensors)
    buf.write(struct.pack("<B", optimizer is not None))
    if optimizer is not None:
        scalars = {
            "learning_rate": optimizer.learning_rate, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "weight_decay": optimizer.weight_decay, "eps": optimizer.eps,
            "step_count": optimizer.step_count, "steps": optimizer.steps,
        }
        _write_json(buf, scalars)
        moments = {f"m/{k}": v for k, v in optimizer.m.items()}
        moments.update({f"v/{k}": v for k, v in optimizer.v.items()})
        _write_table(buf, moments)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        metadata = _read_json(fh)
        tensors = _read_table(fh)
        (has_opt,) = struct.unpack("<B", _read_exact(fh, 1))
        optimizer = None
        if has_opt:
            s = _read_json(fh)
            moments = _read_table(fh)
            optimizer = AdamState(
                learning_rate=s["learning_rate"], beta1=s["beta1"], beta2=s["beta2"],
                weight_decay=s["weight_decay"], eps=s["eps"], step_count=s["step_count"],
                m={k[2:]: v for k, v in moments.items() if k.startswith("m/")},
                v={k[2:]: v for k, v in moments.items() if k.startswith("v/")},
                steps={k: int(v) for k, v in s["steps"].items()},
            )
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    return Checkpoint(tensors, metadata, optimizer)


def prefixed(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in state.items()}
