"""Depth evaluation: MAE, RMSE, delta accuracies, PSNR and a gradient proxy.

``hf_proxy`` is the mean magnitude of the difference between the central
difference gradients of prediction and ground truth. It is a cheap
high-frequency-detail score and NOT LPIPS; lower is better.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

PSNR_CAP = 100.0
DELTA_MIN_GT = 1e-4
ALIGN_CLAMP = (1e-4, 1.0)
TSV_COLUMNS = ("mae", "rmse", "delta1", "delta2", "delta3", "psnr", "hf_proxy", "n_pixels", "alignment")


@dataclass
class MetricReport:
    mae: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    psnr: float
    hf_proxy: float
    n_pixels: int
    alignment: str = "none"

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in TSV_COLUMNS]


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _as2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape[-2:])


def _mad(x: np.ndarray, med: float) -> float:
    return float(np.mean(np.abs(x - med)))


def align_median(pred, gt, valid=None, clamp: bool = True) -> np.ndarray:
    """Positive affine map of ``pred`` matching median and MAD of ``gt``."""
    pred, gt = _as2d(pred), _as2d(gt)
    valid = np.ones(gt.shape, bool) if valid is None else _as2d(valid).astype(bool)
    if not valid.any():
        raise ValueError("align_median: no valid pixels")
    p, g = pred[valid], gt[valid]
    mp, mg = float(np.median(p)), float(np.median(g))
    scale = _mad(g, mg) / max(_mad(p, mp), 1e-6)
    out = scale * (pred - mp) + mg
    return np.clip(out, *ALIGN_CLAMP) if clamp else out


def _hf_proxy(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float:
    if min(pred.shape) < 3:
        return 0.0

    def grads(a):
        gx = (a[1:-1, 2:] - a[1:-1, :-2]) / 2.0
        gy = (a[2:, 1:-1] - a[:-2, 1:-1]) / 2.0
        return gx, gy

    pgx, pgy = grads(pred)
    ggx, ggy = grads(gt)
    m = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1])
    if not m.any():
        return 0.0
    mag = np.sqrt((pgx - ggx) ** 2 + (pgy - ggy) ** 2)
    return float(mag[m].mean())


def compute(pred, gt, alignment: str = "none", valid=None) -> MetricReport:
    pred, gt = _as2d(pred), _as2d(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"compute: shape mismatch {pred.shape} vs {gt.shape}")
    valid = np.isfinite(gt) if valid is None else (_as2d(valid).astype(bool) & np.isfinite(gt))
    if not valid.any():
        raise ValueError("compute: empty valid set")
    if alignment == "median":
        pred = align_median(pred, gt, valid)
    elif alignment != "none":
        raise ValueError(f"unknown alignment {alignment!r}")

    diff = pred[valid] - gt[valid]
    mae = float(np.mean(np.abs(diff)))
    mse = float(np.mean(diff ** 2))
    rmse = math.sqrt(mse)
    psnr = PSNR_CAP if mse == 0 else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))

    dm = valid & (gt > DELTA_MIN_GT)
    deltas = [0.0, 0.0, 0.0]
    if dm.any():
        p, g = pred[dm], gt[dm]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.maximum(p / g, g / p)
        ratio = np.where(p > 0, ratio, np.inf)
        deltas = [float(np.mean(ratio < 1.25 ** k)) for k in (1, 2, 3)]

    return MetricReport(mae=mae, rmse=rmse, delta1=deltas[0], delta2=deltas[1], delta3=deltas[2],
                        psnr=psnr, hf_proxy=_hf_proxy(pred, gt, valid),
                        n_pixels=int(valid.sum()), alignment=alignment)


def mean_report(reports: list[MetricReport]) -> MetricReport:
    """Per-sample reports averaged in list order."""
    if not reports:
        raise ValueError("mean_report: no reports")
    vals = {}
    for f in fields(MetricReport):
        if f.name == "n_pixels":
            vals[f.name] = sum(r.n_pixels for r in reports)
        elif f.name == "alignment":
            vals[f.name] = reports[0].alignment
        else:
            total = 0.0
            for r in reports:
                total += getattr(r, f.name)
            vals[f.name] = total / len(reports)
    return MetricReport(**vals)


def to_tsv(rows: list[tuple[str, MetricReport]], key: str = "name") -> str:
    lines = ["\t".join((key,) + TSV_COLUMNS)]
    for name, rep in rows:
        lines.append("\t".join([name] + rep.row()))
    return "\n".join(lines) + "\n"


def pretty_table(rows: list[tuple[str, MetricReport]]) -> str:
    cols = ("mae", "rmse", "delta3", "psnr", "hf_proxy (not LPIPS)")
    out = [f"{'':<12}" + "".join(f"{c:>22}" for c in cols)]
    for name, r in rows:
        vals = (r.mae, r.rmse, r.delta3, r.psnr, r.hf_proxy)
        out.append(f"{name:<12}" + "".join(f"{v:>22.5f}" for v in vals))
    return "\n".join(out)
