"""D3CK checkpoint format.

Layout (all integers little-endian)::

    b"D3CK" | version u32 | entry count u32
    per entry, sorted by name:
        name length u16 | UTF-8 name | rank u8 | dims u32 * rank | f32 payload
    CRC32 u32 over every byte between the header and the CRC

Metadata strings ride along as rank-1 entries named ``__meta__.<key>``
whose payload is the UTF-8 bytes stored one per f32 (exact for 0..255),
so the file stays a flat list of tensors.
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"D3CK"
VERSION = 1
META_PREFIX = "__meta__."


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class ModelCheckpoint:
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)
    format_version: int = VERSION


def _entries(ckpt: ModelCheckpoint) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in ckpt.tensors.items():
        if name.startswith(META_PREFIX):
            raise CheckpointError(f"tensor name {name!r} uses the reserved metadata prefix")
        out[name] = np.array(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
    for key, value in ckpt.meta.items():
        out[META_PREFIX + key] = np.frombuffer(str(value).encode("utf-8"), dtype=np.uint8).astype("<f4")
    return out


def dumps(ckpt: ModelCheckpoint) -> bytes:
    entries = _entries(ckpt)
    body = bytearray()
    for name in sorted(entries):
        arr = entries[name]
        raw = name.encode("utf-8")
        if len(raw) >= 2 ** 16:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    header = MAGIC + struct.pack("<II", ckpt.format_version, len(entries))
    return header + bytes(body) + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(blob: bytes) -> ModelCheckpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 16:
        raise TruncatedCheckpointError("checkpoint shorter than its header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {VERSION}")
    body = memoryview(blob)[12:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)

    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedCheckpointError(f"payload truncated at byte {12 + pos}")
        out = bytes(body[pos:pos + n])
        pos += n
        return out

    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CrcMismatchError(f"corrupt tensor name: {exc}") from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if name in tensors or META_PREFIX + name in meta:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        if name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = bytes(arr.astype(np.uint8)).decode("utf-8")
        else:
            tensors[name] = arr
    if pos != len(body):
        raise TruncatedCheckpointError(f"{len(body) - pos} unexpected trailing bytes")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcMismatchError("CRC32 mismatch: checkpoint payload is corrupt")
    return ModelCheckpoint(tensors=tensors, meta=meta, format_version=version)


def save(weights, meta: dict[str, str] | None, path) -> Path:
    """Write atomically; ``weights`` is a name->array mapping or a torch module."""
    if isinstance(weights, torch.nn.Module):
        weights = state_arrays(weights)
    ckpt = weights if isinstance(weights, ModelCheckpoint) else ModelCheckpoint(dict(weights), dict(meta or {}))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(dumps(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path) -> ModelCheckpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def bind(module: torch.nn.Module, ckpt: ModelCheckpoint) -> torch.nn.Module:
    """Copy checkpoint tensors into ``module``; any name or shape mismatch raises."""
    state = module.state_dict()
    missing = sorted(set(state) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(state))
    if missing or extra:
        raise ShapeMismatchError(f"checkpoint/module names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    new = {}
    for name, ref in state.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ShapeMismatchError(f"{name}: checkpoint shape {tuple(arr.shape)} vs model {tuple(ref.shape)}")
        new[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    module.load_state_dict(new)
    return module
