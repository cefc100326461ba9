"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BLNS"                       magic
    u32   format version (1)
    u32   n, then n bytes         ModelConfig as UTF-8 JSON (sorted keys)
    u32   number of parameter blocks
    per block, in ``model.parameter_shapes`` order:
        u32 n, n bytes            parameter name
        u32 ndim, ndim * u64      shape
        prod(shape) * f64         values, row-major
    32 bytes                      SHA-256 of everything above
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptionError, ValidationError
from .model import ModelConfig, ModelState, parameter_shapes

MAGIC = b"BLNS"
FORMAT_VERSION = 1


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_bytes(state: ModelState) -> bytes:
    cfg = json.dumps(dataclasses.asdict(state.config), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg]
    order = parameter_shapes(state.config)
    parts.append(struct.pack("<I", len(order)))
    for name, shape in order:
        arr = np.ascontiguousarray(state.params[name], dtype="<f8")
        if arr.shape != shape:
            raise ValidationError(f"parameter {name} has shape {arr.shape}, expected {shape}")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        parts += [struct.pack("<Q", n) for n in arr.shape]
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save(state: ModelState, path: str | os.PathLike) -> Path:
    atomic_write_bytes(path, to_bytes(state))
    return Path(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def from_bytes(payload: bytes, expected_config: ModelConfig | None = None) -> ModelState:
    if len(payload) < 4 + 32 or payload[:4] != MAGIC:
        raise CorruptionError("not a checkpoint (bad magic or too short)")
    body, digest = payload[:-32], payload[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ValidationError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    try:
        cfg_dict = json.loads(r.take(r.u32()).decode("utf-8"))
        config = ModelConfig(**cfg_dict).validate()
    except (ValueError, TypeError) as exc:
        raise CorruptionError(f"checkpoint config unreadable: {exc}") from exc
    if expected_config is not None and config != expected_config:
        diffs = [
            f.name for f in dataclasses.fields(ModelConfig)
            if getattr(config, f.name) != getattr(expected_config, f.name)
        ]
        raise ValidationError(f"checkpoint config differs from requested config in: {', '.join(diffs)}")
    order = parameter_shapes(config)
    n_blocks = r.u32()
    if n_blocks != len(order):
        raise CorruptionError(f"checkpoint has {n_blocks} blocks, config implies {len(order)}")
    params = {}
    for name, shape in order:
        got = r.take(r.u32()).decode("utf-8")
        if got != name:
            raise CorruptionError(f"block order mismatch: found {got!r}, expected {name!r}")
        dims = tuple(r.u64() for _ in range(r.u32()))
        if dims != shape:
            raise CorruptionError(f"block {name} has shape {dims}, expected {shape}")
        n = int(np.prod(dims)) if dims else 1
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(body):
        raise CorruptionError("trailing bytes after parameter blocks")
    return ModelState(config, params)


def load(path: str | os.PathLike, expected_config: ModelConfig | None = None) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), expected_config)
