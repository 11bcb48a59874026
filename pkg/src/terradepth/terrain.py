"""Synthetic remote-sensing tiles: diamond-square heightmaps + hillshade.

Each tile is fully determined by ``(seed, index)``; the height field doubles
as ground-truth depth and its hillshaded rendering as the RGB input.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TerrainConfig
from .netpbm import NetpbmError, read_pgm, read_ppm, write_pgm, write_ppm

MANIFEST = "manifest.tsv"
MANIFEST_COLUMNS = ("id", "rgb_path", "depth_path", "split")


class DatasetError(ValueError):
    pass


@dataclass
class SamplePair:
    id: str
    rgb: np.ndarray      # (3, H, W) float32 in [0, 1]
    depth: np.ndarray    # (1, H, W) float32 in [0, 1]
    split: str = "train"


def tile_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def diamond_square(n_levels: int, roughness: float, rng: np.random.Generator) -> np.ndarray:
    """Raw (2**n_levels + 1)^2 height field, not normalized.

    Edge points in the diamond step average only their two along-edge
    neighbours, so zero displacement reproduces bilinear interpolation of
    the corners exactly.
    """
    n = 2 ** n_levels
    h = np.zeros((n + 1, n + 1))
    h[0, 0], h[0, n], h[n, 0], h[n, n] = rng.random(4)
    amp, step = roughness, n
    while step > 1:
        half = step // 2
        # square step: cell centres from the four diagonal corners
        c = (h[0:n:step, 0:n:step] + h[0:n:step, step::step]
             + h[step::step, 0:n:step] + h[step::step, step::step]) / 4.0
        h[half::step, half::step] = c + amp * rng.uniform(-1.0, 1.0, c.shape)

        # diamond step, points on corner rows (between corners horizontally)
        lr = (h[0::step, 0:n:step] + h[0::step, step::step]) / 2.0
        ud_sum = np.zeros_like(lr)
        ud_sum[1:-1] = h[half:n - half + 1:step, half::step][:-1] + h[half + step::step, half::step]
        a = lr.copy()
        a[1:-1] = (2.0 * lr[1:-1] + ud_sum[1:-1]) / 4.0
        # points on corner columns (between corners vertically)
        ud = (h[0:n:step, 0::step] + h[step::step, 0::step]) / 2.0
        lr_sum = np.zeros_like(ud)
        lr_sum[:, 1:-1] = h[half::step, half:n - half + 1:step][:, :-1] + h[half::step, half + step::step]
        b = ud.copy()
        b[:, 1:-1] = (2.0 * ud[:, 1:-1] + lr_sum[:, 1:-1]) / 4.0

        h[0::step, half::step] = a + amp * rng.uniform(-1.0, 1.0, a.shape)
        h[half::step, 0::step] = b + amp * rng.uniform(-1.0, 1.0, b.shape)
        amp *= roughness
        step = half
    return h


def _normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def generate_heightmap(cfg: TerrainConfig, index: int) -> np.ndarray:
    """(1, S, S) heights in [0, 1], deterministic in (cfg.seed, index)."""
    size = cfg.tile_size
    levels = max(1, math.ceil(math.log2(size)))
    raw = diamond_square(levels, cfg.roughness, tile_rng(cfg.seed, index))
    return _normalize(raw[:size, :size])[None]


def hillshade(height: np.ndarray, azimuth_deg: float, elevation_deg: float,
              z_factor: float = 1.0) -> np.ndarray:
    """Lambertian shade in [0, 1] for a (H, W) field; row 0 is north."""
    z = np.asarray(height, dtype=np.float64) * z_factor
    d_row, d_col = np.gradient(z)
    dz_east, dz_north = d_col, -d_row
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    light = (math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el))
    norm = np.sqrt(dz_east ** 2 + dz_north ** 2 + 1.0)
    shade = (-dz_east * light[0] - dz_north * light[1] + light[2]) / norm
    return np.clip(shade, 0.0, 1.0)


_CMAP_STOPS = np.array([0.0, 0.35, 0.65, 1.0])
_CMAP_RGB = np.array([
    [0.20, 0.40, 0.20],
    [0.45, 0.60, 0.30],
    [0.60, 0.50, 0.35],
    [0.95, 0.95, 0.95],
])


def elevation_colors(height: np.ndarray) -> np.ndarray:
    h = np.clip(height, 0.0, 1.0)
    return np.stack([np.interp(h, _CMAP_STOPS, _CMAP_RGB[:, c]) for c in range(3)])


def render_rgb(height: np.ndarray, cfg: TerrainConfig) -> np.ndarray:
    """(3, H, W) in [0, 1]: 70% hillshade, 30% elevation colour."""
    h = np.asarray(height, dtype=np.float64).reshape(np.shape(height)[-2:])
    shade = hillshade(h, cfg.sun_azimuth_deg, cfg.sun_elevation_deg, cfg.z_factor)
    rgb = 0.7 * shade[None] + 0.3 * elevation_colors(h)
    return np.clip(rgb, 0.0, 1.0)


def split_sizes(n: int) -> tuple[int, int, int]:
    train = (8 * n) // 10
    val = n // 10
    return train, val, n - train - val


def split_of(index: int, n: int) -> str:
    train, val, _ = split_sizes(n)
    if index < train:
        return "train"
    return "val" if index < train + val else "test"


def tile_id(index: int) -> str:
    return f"tile_{index:05d}"


def make_sample(cfg: TerrainConfig, index: int) -> SamplePair:
    depth = generate_heightmap(cfg, index)
    rgb = render_rgb(depth[0], cfg)
    return SamplePair(tile_id(index), rgb.astype(np.float32), depth.astype(np.float32),
                      split_of(index, cfg.count))


def write_dataset(cfg: TerrainConfig, out_dir) -> Path:
    cfg.validate()
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(cfg.count):
        s = make_sample(cfg, i)
        rgb_rel, depth_rel = f"rgb/{s.id}.ppm", f"depth/{s.id}.pgm"
        write_ppm(out / rgb_rel, s.rgb)
        write_pgm(out / depth_rel, s.depth[0])
        rows.append((s.id, rgb_rel, depth_rel, s.split))
    with open(out / MANIFEST, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in rows:
            fh.write("\t".join(r) + "\n")
    return out


def read_manifest(data_dir) -> list[dict[str, str]]:
    path = Path(data_dir) / MANIFEST
    if not path.is_file():
        raise DatasetError(f"missing manifest {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
        header = tuple(rows[0].keys()) if rows else ()
    if rows and not set(MANIFEST_COLUMNS) <= set(header):
        raise DatasetError(f"{path}: expected columns {MANIFEST_COLUMNS}, got {header}")
    for n, r in enumerate(rows, start=2):
        if any(r.get(c) in (None, "") for c in MANIFEST_COLUMNS):
            raise DatasetError(f"{path}:{n}: incomplete manifest row")
        if r["split"] not in ("train", "val", "test"):
            raise DatasetError(f"{path}:{n}: bad split {r['split']!r}")
    return rows


def read_dataset(data_dir) -> list[SamplePair]:
    data_dir = Path(data_dir)
    out = []
    for r in read_manifest(data_dir):
        for col in ("rgb_path", "depth_path"):
            if not (data_dir / r[col]).is_file():
                raise DatasetError(f"manifest entry {r['id']}: missing file {r[col]}")
        try:
            rgb = read_ppm(data_dir / r["rgb_path"])
            depth = read_pgm(data_dir / r["depth_path"])
        except NetpbmError as exc:
            raise DatasetError(str(exc)) from exc
        if rgb.shape[1:] != depth.shape:
            raise DatasetError(f"{r['id']}: rgb {rgb.shape[1:]} and depth {depth.shape} differ")
        out.append(SamplePair(r["id"], rgb.astype(np.float32), depth[None].astype(np.float32), r["split"]))
    return out
