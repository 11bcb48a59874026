"""Hierarchical depth-normalization loss.

Contexts come from the ground truth only. Spatial contexts are k x k grid
cells; depth contexts are bins, either equal-width ranges or equal-count
quantiles. Each
(strategy, scale) pair is a *layer* that partitions the valid pixels, so a
pixel belongs to exactly one context per layer. Inside a context both maps
are normalized by their own median and mean absolute deviation from it,
and the loss is the mean absolute difference of the normalized values,
averaged over a pixel's contexts and then over pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import ShapeError, Tensor, check_same_shape
from .config import HdnConfig


@dataclass
class ContextLayer:
    strategy: str          # "grid" | "depth-range" | "depth-quantile"
    scale: int             # cells per side, or number of bins requested
    labels: np.ndarray     # (H, W) int64; -1 marks invalid pixels

    @property
    def n_contexts(self) -> int:
        return int(self.labels.max()) + 1


@dataclass
class ContextSet:
    layers: list[ContextLayer]
    valid: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def contexts(self) -> list[tuple[str, int, np.ndarray]]:
        """Every context as (strategy, scale, flat pixel indices)."""
        out = []
        for layer in self.layers:
            flat = layer.labels.reshape(-1)
            for k in range(layer.n_contexts):
                out.append((layer.strategy, layer.scale, np.flatnonzero(flat == k)))
        return out

    def membership(self, i: int) -> list[int]:
        """Indices into ``contexts`` of the contexts containing flat pixel ``i``."""
        out, offset = [], 0
        for layer in self.layers:
            lab = int(layer.labels.reshape(-1)[i])
            if lab >= 0:
                out.append(offset + lab)
            offset += layer.n_contexts
        return out

    def torch_layers(self) -> tuple[Tensor, list[Tensor], list[int]]:
        if "t" not in self._cache:
            vidx = np.flatnonzero(self.valid.reshape(-1))
            labs = [torch.from_numpy(l.labels.reshape(-1)[vidx].copy()) for l in self.layers]
            self._cache["t"] = (torch.from_numpy(vidx), labs, [l.n_contexts for l in self.layers])
        return self._cache["t"]

    def gt_normalized(self, gt: Tensor, mad_floor: float) -> Tensor:
        """(n_layers, n_valid) normalized ground truth, cached per gt map."""
        vidx, labs, ns = self.torch_layers()
        vals = gt.detach().reshape(-1)[vidx]
        hit = self._cache.get("gt")
        if hit is None or hit[0] != mad_floor or hit[1].dtype != vals.dtype or not torch.equal(hit[1], vals):
            lab, n = _stack_layers(labs, ns)
            norm = _normalize_groups(vals.repeat(len(labs)), lab, n, mad_floor)
            self._cache["gt"] = hit = (mad_floor, vals.clone(), norm.reshape(len(labs), -1))
        return hit[2]


def _merge_small(labels: np.ndarray, n: int, min_size: int) -> np.ndarray:
    """Relabel 0..n-1 bins so each surviving bin has >= min_size members.

    Empty bins vanish; an undersized bin merges into its smaller adjacent
    neighbour (in label order).
    """
    counts = np.bincount(labels, minlength=n)
    groups = [[k] for k in range(n) if counts[k] > 0]
    sizes = [int(counts[k]) for k in range(n) if counts[k] > 0]
    while len(groups) > 1:
        small = [j for j, s in enumerate(sizes) if s < min_size]
        if not small:
            break
        j = small[0]
        if j == 0:
            nb = 1
        elif j == len(groups) - 1:
            nb = j - 1
        else:
            nb = j - 1 if sizes[j - 1] <= sizes[j + 1] else j + 1
        lo, hi = min(j, nb), max(j, nb)
        groups[lo] = groups[lo] + groups[hi]
        sizes[lo] += sizes[hi]
        del groups[hi], sizes[hi]
    remap = np.empty(n, dtype=np.int64)
    for new, members in enumerate(groups):
        remap[members] = new
    return remap[labels]


def _grid_labels(h: int, w: int, k: int) -> np.ndarray:
    rows = (np.arange(h) * k) // h
    cols = (np.arange(w) * k) // w
    return rows[:, None] * k + cols[None, :]


def build_contexts(gt, cfg: HdnConfig | None = None, valid=None) -> ContextSet:
    cfg = cfg or HdnConfig()
    gt = np.asarray(gt.detach().cpu() if isinstance(gt, Tensor) else gt, dtype=np.float64)
    gt = gt.reshape(gt.shape[-2:])
    h, w = gt.shape
    valid = np.isfinite(gt) if valid is None else (np.asarray(valid, dtype=bool).reshape(h, w) & np.isfinite(gt))
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("build_contexts: depth map has no valid pixels")
    if n_valid < cfg.min_context_size:
        raise ValueError(f"build_contexts: {n_valid} valid pixels < min_context_size {cfg.min_context_size}")
    d = gt[valid]

    def layer(strategy: str, scale: int, raw: np.ndarray, n: int) -> ContextLayer:
        merged = _merge_small(raw, n, cfg.min_context_size)
        labels = np.full((h, w), -1, dtype=np.int64)
        labels[valid] = merged
        return ContextLayer(strategy, scale, labels)

    layers = []
    for k in cfg.grid_levels:
        layers.append(layer("grid", k, _grid_labels(h, w, k)[valid], k * k))

    lo, hi = d.min(), d.max()
    nb = cfg.range_bins
    if hi > lo:
        rb = np.clip(((d - lo) / (hi - lo) * nb).astype(np.int64), 0, nb - 1)
    else:
        rb = np.zeros(d.shape, dtype=np.int64)
    layers.append(layer("depth-range", nb, rb, nb))

    nq = cfg.quantile_bins
    edges = np.quantile(d, np.linspace(0.0, 1.0, nq + 1)[1:-1])
    qb = np.searchsorted(edges, d, side="right").astype(np.int64)
    layers.append(layer("depth-quantile", nq, qb, nq))
    return ContextSet(layers=layers, valid=valid)


def _group_median(values: Tensor, labels: Tensor, n: int) -> Tensor:
    """Per-group median (detached), averaging the central pair for even sizes."""
    with torch.no_grad():
        v = values.detach()
        order = torch.sort(v, stable=True).indices
        order = order[torch.sort(labels[order], stable=True).indices]
        sv = v[order]
        counts = torch.bincount(labels, minlength=n)
        starts = torch.cumsum(counts, 0) - counts
        lo = starts + (counts - 1) // 2
        hi = starts + counts // 2
        return 0.5 * (sv[lo] + sv[hi])


def _normalize_groups(values: Tensor, labels: Tensor, n: int, floor: float,
                      med: Tensor | None = None) -> Tensor:
    if med is None:
        med = _group_median(values, labels, n)
    dev = values - med[labels]
    counts = torch.bincount(labels, minlength=n).to(values.dtype)
    mad = torch.zeros(n, dtype=values.dtype).index_add(0, labels, dev.abs()) / counts
    return dev / mad.clamp(min=floor)[labels]


def normalize_context(d: Tensor, ctx, mad_floor: float = 1e-6) -> Tensor:
    """(d_i - median) / max(MAD, floor) over the pixels ``ctx`` of ``d``."""
    vals = d.reshape(-1)[torch.as_tensor(np.asarray(ctx), dtype=torch.long)]
    labels = torch.zeros(vals.shape[0], dtype=torch.long)
    return _normalize_groups(vals, labels, 1, mad_floor)


def _as_batch(x: Tensor) -> Tensor:
    if x.dim() == 2:
        return x.unsqueeze(0)
    if x.dim() == 4:
        if x.shape[1] != 1:
            raise ShapeError(f"expected single-channel depth, got {tuple(x.shape)}")
        return x[:, 0]
    if x.dim() == 3:
        return x
    raise ShapeError(f"unsupported depth shape {tuple(x.shape)}")


def _batched_layers(ctxs: list[ContextSet], hw: int):
    n_layers = len(ctxs[0].layers)
    flat_idx, layer_labels, layer_n = [], [[] for _ in range(n_layers)], [0] * n_layers
    for b, cs in enumerate(ctxs):
        if len(cs.layers) != n_layers:
            raise ShapeError("context sets in a batch must have the same number of layers")
        vidx, labs, ns = cs.torch_layers()
        flat_idx.append(vidx + b * hw)
        for l in range(n_layers):
            layer_labels[l].append(labs[l] + layer_n[l])
            layer_n[l] += ns[l]
    return torch.cat(flat_idx), [torch.cat(ls) for ls in layer_labels], layer_n


def _stack_layers(labels: list[Tensor], ns: list[int]) -> tuple[Tensor, int]:
    """Offset each layer's labels so all layers form one grouping."""
    out, off = [], 0
    for lab, n in zip(labels, ns):
        out.append(lab + off)
        off += n
    return torch.cat(out), off


def layer_medians(d: Tensor, ctxs) -> list[Tensor]:
    """Per-layer context medians of ``d``; lets callers freeze them."""
    d = _as_batch(d)
    ctxs = [ctxs] if isinstance(ctxs, ContextSet) else list(ctxs)
    idx, labels, ns = _batched_layers(ctxs, d.shape[-1] * d.shape[-2])
    v = d.reshape(-1)[idx]
    return [_group_median(v, lab, n) for lab, n in zip(labels, ns)]


def hdn_loss(pred: Tensor, gt: Tensor, ctxs, mad_floor: float = 1e-6,
             pred_medians: list[Tensor] | None = None) -> Tensor:
    """Scalar loss, differentiable in ``pred``.

    ``ctxs`` is one ContextSet or a list with one per batch item. Shapes
    (H, W), (B, H, W) or (B, 1, H, W) are accepted.
    """
    check_same_shape(pred, gt, "hdn_loss")
    p, g = _as_batch(pred), _as_batch(gt)
    ctxs = [ctxs] if isinstance(ctxs, ContextSet) else list(ctxs)
    if not ctxs:
        raise ValueError("hdn_loss: empty context set")
    if len(ctxs) != p.shape[0]:
        raise ShapeError(f"hdn_loss: {len(ctxs)} context sets for batch of {p.shape[0]}")
    for cs in ctxs:
        if cs.shape != tuple(p.shape[-2:]):
            raise ShapeError(f"hdn_loss: context shape {cs.shape} vs depth {tuple(p.shape[-2:])}")
    idx, labels, ns = _batched_layers(ctxs, p.shape[-1] * p.shape[-2])
    n_layers = len(labels)
    # every valid pixel sits in exactly one context per layer, so stacking
    # the layers gives one grouping over n_layers copies of the pixels
    lab, n = _stack_layers(labels, ns)
    pv = p.reshape(-1)[idx].repeat(n_layers)
    gnorm = torch.cat([cs.gt_normalized(g[b], mad_floor) for b, cs in enumerate(ctxs)], dim=1).reshape(-1)
    med = None if pred_medians is None else torch.cat([m.reshape(-1) for m in pred_medians])
    diff = (gnorm - _normalize_groups(pv, lab, n, mad_floor, med)).abs()
    return diff.reshape(n_layers, -1).sum(0).div(n_layers).mean()


def single_context(shape: tuple[int, int], valid=None) -> ContextSet:
    """One context spanning every valid pixel."""
    valid = np.ones(shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    labels = np.where(valid, 0, -1).astype(np.int64)
    return ContextSet(layers=[ContextLayer("grid", 1, labels)], valid=valid)
