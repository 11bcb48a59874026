"""Binary PGM (P5) and PPM (P6) reading and writing.

Images are float arrays in [0, 1]: depth as (H, W), colour as (3, H, W).
Samples wider than 8 bits are big-endian, as netpbm requires.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _quantize(a: np.ndarray, maxval: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.isfinite(a).all():
        raise NetpbmError("cannot write non-finite samples")
    return np.rint(np.clip(a, 0.0, 1.0) * maxval)


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def write_pgm(path, depth, maxval: int = 65535) -> None:
    depth = np.asarray(depth)
    if depth.ndim == 3 and depth.shape[0] == 1:
        depth = depth[0]
    if depth.ndim != 2:
        raise NetpbmError(f"PGM needs a 2-D array, got shape {depth.shape}")
    h, w = depth.shape
    dtype = ">u2" if maxval > 255 else "u1"
    body = _quantize(depth, maxval).astype(dtype).tobytes()
    _atomic_write(Path(path), b"P5\n%d %d\n%d\n" % (w, h, maxval) + body)


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise NetpbmError(f"PPM needs a (3, H, W) array, got shape {rgb.shape}")
    _, h, w = rgb.shape
    body = _quantize(rgb, 255).astype("u1").transpose(1, 2, 0).tobytes()
    _atomic_write(Path(path), b"P6\n%d %d\n255\n" % (w, h) + body)


def _parse_header(blob: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: bad magic number {magic!r}, expected P5 or P6")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: malformed header")
        fields.append(int(blob[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise NetpbmError(f"{path}: malformed header")
    w, h, maxval = fields
    if not (0 < maxval < 65536) or w <= 0 or h <= 0:
        raise NetpbmError(f"{path}: invalid header values {w}x{h} maxval {maxval}")
    return magic, w, h, maxval, pos + 1


def _read(path, want: bytes) -> tuple[np.ndarray, int]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise NetpbmError(f"cannot read {path}: {exc}") from exc
    magic, w, h, maxval, off = _parse_header(blob, path)
    if magic != want:
        raise NetpbmError(f"{path}: expected {want.decode()}, found {magic.decode()}")
    ch = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    need = w * h * ch * dtype.itemsize
    if len(blob) - off < need:
        raise NetpbmError(f"{path}: truncated payload, {len(blob) - off} of {need} bytes")
    raw = np.frombuffer(blob, dtype=dtype, count=w * h * ch, offset=off)
    return raw.reshape(h, w, ch).astype(np.float64) / maxval, maxval


def read_pgm(path) -> np.ndarray:
    """(H, W) float64 in [0, 1]."""
    a, _ = _read(path, b"P5")
    return a[..., 0]


def read_ppm(path) -> np.ndarray:
    """(3, H, W) float64 in [0, 1]."""
    a, _ = _read(path, b"P6")
    return a.transpose(2, 0, 1)
