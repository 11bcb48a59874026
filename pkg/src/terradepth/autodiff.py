"""Differentiable-array substrate.

Tensors and reverse-mode gradients come from torch autograd. This
module adds the pieces the rest of the package relies on:
shape checks with readable errors, finiteness guards, a detached
(even-size-averaging) median, and ``grad_check``, a central-difference
oracle that never touches autograd's backward pass.
"""
from __future__ import annotations

from typing import Callable

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

DTYPE = torch.float32


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


def check_same_shape(a: Tensor, b: Tensor, what: str = "operands") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def assert_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {what}")
    return t


def tensor(data, requires_grad: bool = False, dtype: torch.dtype = DTYPE) -> Tensor:
    return torch.as_tensor(data, dtype=dtype).clone().requires_grad_(requires_grad)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return torch.Generator().manual_seed(seed)


# -- forward ops ------------------------------------------------------------
# Thin aliases so model code reads uniformly; gradients are exact autograd.

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}") from None
    return a + b


def concat(tensors: list[Tensor], dim: int = 1) -> Tensor:
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(ref, other)) if i != dim % len(ref)):
            raise ShapeError(f"concat: shape mismatch {tuple(ref)} vs {tuple(other)}")
    return torch.cat(tensors, dim=dim)


relu = F.relu
gelu = F.gelu
silu = F.silu
sigmoid = torch.sigmoid
tanh = torch.tanh
exp = torch.exp
log = torch.log
softmax = F.softmax
layer_norm = F.layer_norm
group_norm = F.group_norm
conv2d = F.conv2d
conv_transpose2d = F.conv_transpose2d
avg_pool2d = F.avg_pool2d
max_pool2d = F.max_pool2d


def upsample(x: Tensor, scale: float | None = None, size=None, mode: str = "nearest") -> Tensor:
    kw = {} if mode == "nearest" else {"align_corners": False}
    return F.interpolate(x, scale_factor=scale, size=size, mode=mode, **kw)


def _median_along_sorted(sorted_vals: Tensor, n: int) -> Tensor:
    lo, hi = (n - 1) // 2, n // 2
    return 0.5 * (sorted_vals[..., lo] + sorted_vals[..., hi])


def median(x: Tensor, dim: int | None = None) -> Tensor:
    """Median treated as a constant for backprop; even sizes average the two
    central values."""
    with torch.no_grad():
        if dim is None:
            x = x.reshape(-1)
            dim = 0
        vals, _ = torch.sort(x.movedim(dim, -1), dim=-1)
        return _median_along_sorted(vals, vals.shape[-1])


# -- finite-difference oracle -----------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
               dtype: torch.dtype | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``dtype`` optionally recasts ``x`` (e.g. float64 for network checks);
    ``f`` must then accept that dtype.
    """
    x0 = x.detach().clone()
    if dtype is not None:
        x0 = x0.to(dtype)
    xg = x0.clone().requires_grad_(True)
    y = f(xg)
    if y.numel() != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {tuple(y.shape)}")
    (analytic,) = torch.autograd.grad(y.reshape(()), xg, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    analytic = analytic.detach().reshape(-1).double()

    flat = x0.reshape(-1)
    numeric = torch.empty_like(analytic)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f(x0))
            flat[i] = orig - eps
            fm = float(f(x0))
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
    err = (analytic - numeric).abs() / analytic.abs().clamp(min=1.0)
    return float(err.max()) if err.numel() else 0.0
