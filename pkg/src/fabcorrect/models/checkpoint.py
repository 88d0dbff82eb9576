"""Binary checkpoint format for U-Net parameters.

Layout (all integers little-endian)::

    b"UNETCKPT"  uint32 version  uint32 len  <config json, sorted keys>
    uint32 n_params
    repeated: uint16 name_len  name  uint8 frozen  uint8 ndim  uint32[ndim] dims  float32 data
    uint32 crc32 of everything above

Parameters are written in model order, so save(load(save(m))) yields the
same bytes as save(m).
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CheckpointFormatError
from .unet import ModelGraph, UNetConfig, build_model

MAGIC = b"UNETCKPT"
VERSION = 1


def checkpoint_bytes(model: ModelGraph) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", int(model.frozen[name]), t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: ModelGraph, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf: bytes, expected: UNetConfig | None = None) -> ModelGraph:
    """Rebuild a model from checkpoint bytes, verifying integrity and names."""
    if len(buf) < len(MAGIC) + 4 or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic number")
    if len(buf) < len(MAGIC) + 12:
        raise CheckpointFormatError("truncated checkpoint header")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(len(MAGIC), "magic")
    version, cfg_len = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        config = UNetConfig.from_dict(json.loads(r.take(cfg_len, "config").decode()))
    except CheckpointFormatError:
        raise
    except Exception as exc:
        raise CheckpointFormatError(f"unreadable config block: {exc}") from exc
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError("checksum mismatch (corrupted or truncated checkpoint)")
    if expected is not None and config != expected:
        raise CheckpointFormatError(f"checkpoint config {config.to_dict()} does not match requested {expected.to_dict()}")
    model = build_model(config)
    (n,) = r.unpack("<I", "parameter count")
    seen = []
    for _ in range(n):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode()
        frozen, ndim = r.unpack("<BB", "flags")
        dims = r.unpack(f"<{ndim}I", "dims")
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * count, name), dtype="<f4").reshape(dims)
        if name not in model.params:
            raise CheckpointFormatError(f"unexpected parameter {name!r}")
        if model.params[name].shape != tuple(dims):
            raise CheckpointFormatError(f"{name}: stored shape {dims} vs model {model.params[name].shape}")
        model.params[name].data[...] = data
        model.set_trainable([name], not frozen)
        seen.append(name)
    if r.pos != len(body):
        raise CheckpointFormatError(f"{len(body) - r.pos} trailing bytes after parameters")
    if sorted(seen) != sorted(model.params):
        missing = sorted(set(model.params) - set(seen))
        raise CheckpointFormatError(f"parameter name set mismatch; missing {missing}")
    return model


def load_checkpoint(path: str | Path, expected: UNetConfig | None = None) -> ModelGraph:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(buf, expected)


def checkpoint_hash(model: ModelGraph) -> str:
    """sha256 over the serialized checkpoint bytes."""
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()


def parameter_hash(model: ModelGraph, names=None) -> str:
    """sha256 over raw parameter bytes (optionally a subset), in model order."""
    h = hashlib.sha256()
    for name, t in model.params.items():
        if names is None or name in names:
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
