"""Portable binary checkpoints.

Layout (all integers little-endian u32)::

    b"MHFM" | version | meta_len | meta (UTF-8 JSON) | n_tensors |
    n_tensors x [name_len | name (UTF-8) | ndim | dims... | data (f64 little-endian)]

The JSON block carries the model config, vocabulary and optimizer scalars so a checkpoint is
self-describing. Tensors are model parameters, batch-norm buffers and Adam moments
(``adam.m/<name>``, ``adam.v/<name>``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .film import ModelConfig, MultiHopFiLM
from .training import OptimizerState

MAGIC = b"MHFM"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.meta["config"])


def _put(buf: list[bytes], n: int) -> None:
    buf.append(_U32.pack(n))


def encode(ckpt: Checkpoint) -> bytes:
    buf = [MAGIC]
    _put(buf, VERSION)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    _put(buf, len(meta))
    buf.append(meta)
    _put(buf, len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        _put(buf, len(raw))
        buf.append(raw)
        _put(buf, arr.ndim)
        for d in arr.shape:
            _put(buf, d)
        buf.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes: not an MHFM checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return Checkpoint(meta, tensors)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def from_training(model: MultiHopFiLM, vocab_tokens: list[str], optimizer: OptimizerState | None = None,
                  epoch: int = 0, extra: dict | None = None) -> Checkpoint:
    meta = {"config": model.cfg.to_dict(), "vocab": list(vocab_tokens), "epoch": epoch}
    tensors = {name: p.data for name, p in model.named_parameters()}
    tensors.update(dict(model.named_buffers()))
    if optimizer is not None:
        meta["optimizer"] = {"lr": optimizer.lr, "weight_decay": optimizer.weight_decay,
                             "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps, "t": optimizer.t}
        for name, m in optimizer.m.items():
            tensors[f"adam.m/{name}"] = m
        for name, v in optimizer.v.items():
            tensors[f"adam.v/{name}"] = v
    if extra:
        meta.update(extra)
    return Checkpoint(meta, tensors)


def _check_shape(name: str, want: tuple, got: tuple) -> None:
    if len(want) != len(got):
        raise CheckpointError(f"{name}: checkpoint has {len(got)} dims {got}, model expects {len(want)} dims {want}")
    for i, (a, b) in enumerate(zip(want, got)):
        if a != b:
            raise CheckpointError(f"{name}: dimension {i} is {b} in checkpoint but {a} in model")


def restore_model(model: MultiHopFiLM, ckpt: Checkpoint) -> None:
    """Copy parameters and buffers into ``model``; every model tensor must be present with its shape."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, target in [(n, p.data) for n, p in params.items()] + list(buffers.items()):
        if name not in ckpt.tensors:
            raise CheckpointError(f"{name}: missing from checkpoint")
        _check_shape(name, target.shape, ckpt.tensors[name].shape)
    extra = sorted(n for n in ckpt.tensors if "/" not in n and n not in params and n not in buffers)
    if extra:
        raise CheckpointError(f"{extra[0]}: present in checkpoint but not in model")
    for name, p in params.items():
        p.data = ckpt.tensors[name].copy()
    for name, b in buffers.items():
        b[...] = ckpt.tensors[name]


def restore_optimizer(ckpt: Checkpoint) -> OptimizerState | None:
    meta = ckpt.meta.get("optimizer")
    if meta is None:
        return None
    state = OptimizerState(lr=meta["lr"], weight_decay=meta["weight_decay"], beta1=meta["beta1"],
                           beta2=meta["beta2"], eps=meta["eps"], t=meta["t"])
    for name, arr in ckpt.tensors.items():
        if name.startswith("adam.m/"):
            state.m[name[7:]] = arr.copy()
        elif name.startswith("adam.v/"):
            state.v[name[7:]] = arr.copy()
    return state


def build_model(ckpt: Checkpoint) -> MultiHopFiLM:
    model = MultiHopFiLM(ckpt.config)
    restore_model(model, ckpt)
    return model
