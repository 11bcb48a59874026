"""Progressive linear blending between a clean latent and a coarse latent.

Training samples are straight interpolations ``a_t * z0 + (1 - a_t) * zc``
and inference walks t = T-1 .. 1, re-anchoring every intermediate state to
the original coarse latent. Nothing here is stochastic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import torch

from .autodiff import ShapeError, Tensor, check_same_shape


@dataclass(frozen=True)
class PlbrSchedule:
    T: int
    epsilon: float
    alpha_bar: tuple[float, ...]

    def __getitem__(self, t: int) -> float:
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T - 1}]")
        return self.alpha_bar[t]


def make_schedule(T: int = 6, epsilon: float = 0.8) -> PlbrSchedule:
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(
            f"epsilon must be a positive constant close to 1 but not equal to 1, i.e. in (0, 1); got {epsilon}")
    T = int(T)
    # ratio first so the endpoints are exact: epsilon * 1.0 and epsilon * 0.0
    alpha = tuple(epsilon * ((T - t - 1) / (T - 1)) for t in range(T))
    return PlbrSchedule(T=T, epsilon=float(epsilon), alpha_bar=alpha)


def _blend(a, z_hi: Tensor, zc: Tensor) -> Tensor:
    # anchored form in float64: exact when z_hi == zc or a == 0, and the
    # single rounding back keeps results inside [min(z_hi, zc), max(z_hi, zc)]
    base = zc.double()
    return (base + a * (z_hi.double() - base)).to(zc.dtype)


def forward_blend(z0: Tensor, zc: Tensor, t, sched: PlbrSchedule) -> Tensor:
    """Blend at timestep ``t``; ``t`` may be an int or a per-sample LongTensor."""
    check_same_shape(z0, zc, "forward_blend")
    if isinstance(t, Tensor) and t.dim() > 0:
        if t.shape[0] != z0.shape[0]:
            raise ShapeError(f"forward_blend: {t.shape[0]} timesteps for batch of {z0.shape[0]}")
        if (t < 0).any() or (t >= sched.T).any():
            raise IndexError(f"timesteps outside [0, {sched.T - 1}]")
        a = torch.tensor(sched.alpha_bar, dtype=torch.float64)[t].view(-1, *([1] * (z0.dim() - 1)))
        return _blend(a, z0, zc)
    return _blend(sched[int(t)], z0, zc)


def reverse_step(z_pred: Tensor, zc: Tensor, t_next: int, sched: PlbrSchedule) -> Tensor:
    check_same_shape(z_pred, zc, "reverse_step")
    if not 0 <= t_next <= sched.T - 2:
        raise IndexError(f"t_next {t_next} outside [0, {sched.T - 2}]")
    return _blend(sched[t_next], z_pred, zc)


class Predictor(Protocol):
    def __call__(self, zx: Tensor, zt: Tensor, t: int) -> Tensor: ...


def refine(zc: Tensor, zx: Tensor, model: Predictor, sched: PlbrSchedule,
           on_step: Callable[[int, Tensor, Tensor], None] | None = None) -> Tensor:
    """Run the reverse loop and return the prediction made at t = 1.

    ``model(zx, zt, t)`` is called exactly ``T - 1`` times. ``on_step``, if
    given, receives ``(t, z_t, prediction)`` after each call.
    """
    if zx.shape[0] != zc.shape[0] or zx.shape[2:] != zc.shape[2:]:
        raise ShapeError(f"refine: shape mismatch {tuple(zx.shape)} vs {tuple(zc.shape)}")
    zt = zc
    pred = zc
    for t in range(sched.T - 1, 0, -1):
        pred = model(zx, zt, t)
        check_same_shape(pred, zc, "refine prediction")
        if on_step is not None:
            on_step(t, zt, pred)
        if t > 1:
            zt = reverse_step(pred, zc, t - 1, sched)
    return pred
