"""Conditional U-Net that maps ([z_x, z_t], t) to an estimate of z_0.

Conditioning is channel concatenation plus a sinusoidal timestep embedding
fed through a 2-layer MLP and added as a per-block channel shift. There is
no cross-attention; the only attention is an optional single-head
self-attention at the bottleneck.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import ShapeError, Tensor
from .codec import _norm
from .config import UNetConfig


def sinusoidal_embedding(t, dim: int) -> Tensor:
    """(B,) or scalar timesteps -> (B, dim) [sin | cos] features."""
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t) -> Tensor:
        return self.mlp(sinusoidal_embedding(t, self.dim).to(self.mlp[0].weight.dtype))


def embed_timestep(t: int, dim: int, module: TimeEmbedding | None = None) -> Tensor:
    """Embedding vector for ``t``; raw sinusoid when no MLP is given."""
    if t < 0:
        raise ValueError(f"timestep must be >= 0, got {t}")
    if module is None:
        return sinusoidal_embedding(t, dim)[0]
    return module(t)[0]


class TimeResBlock(nn.Module):
    kind = "res"

    def __init__(self, c_in: int, c_out: int, t_dim: int, groups: int):
        super().__init__()
        self.norm1 = _norm(c_in, groups)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.shift = nn.Linear(t_dim, c_out)
        self.norm2 = _norm(c_out, groups)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.shift(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    kind = "self-attention"

    def __init__(self, c: int, groups: int):
        super().__init__()
        self.norm = _norm(c, groups)
        self.qkv = nn.Conv2d(c, 3 * c, 1)
        self.out = nn.Conv2d(c, c, 1)

    def forward(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        att = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)     # B, hw, hw
        out = (v @ att.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.out(out)


class Downsample(nn.Module):
    kind = "down"

    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, stride=2, padding=1)

    def forward(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    kind = "up"

    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class RefinerUNet(nn.Module):
    def __init__(self, latent_channels: int, cfg: UNetConfig | None = None):
        super().__init__()
        cfg = cfg or UNetConfig()
        cfg.validate()
        self.cfg = cfg
        self.latent_channels = latent_channels
        g, td = cfg.groups, cfg.time_embed_dim
        chans = [cfg.base_channels * m for m in cfg.channel_mults]

        self.time = TimeEmbedding(td)
        self.inp = nn.Conv2d(2 * latent_channels, chans[0], 3, padding=1)
        self.down = nn.ModuleList()
        ch = chans[0]
        skips = []
        for i, c in enumerate(chans):
            self.down.append(TimeResBlock(ch, c, td, g))
            ch = c
            skips.append(ch)
            if i < len(chans) - 1:
                self.down.append(Downsample(ch))
        mid: list[nn.Module] = [TimeResBlock(ch, ch, td, g)]
        if cfg.bottleneck_attention:
            mid.append(SelfAttention(ch, g))
        mid.append(TimeResBlock(ch, ch, td, g))
        self.mid = nn.ModuleList(mid)
        self.up = nn.ModuleList()
        for i, c in reversed(list(enumerate(chans))):
            self.up.append(TimeResBlock(ch + skips[i], c, td, g))
            ch = c
            if i > 0:
                self.up.append(Upsample(ch))
        self.out_norm = _norm(ch, g)
        self.out = nn.Conv2d(ch, latent_channels, 3, padding=1)

    def block_inventory(self) -> list[str]:
        return [m.kind for m in (*self.down, *self.mid, *self.up)]

    def forward(self, zx: Tensor, zt: Tensor, t) -> Tensor:
        if zx.shape != zt.shape:
            raise ShapeError(f"predict: shape mismatch {tuple(zx.shape)} vs {tuple(zt.shape)}")
        if zt.shape[1] != self.latent_channels:
            raise ShapeError(f"predict: latent has {zt.shape[1]} channels, expected {self.latent_channels}")
        levels = len(self.cfg.channel_mults) - 1
        if zt.shape[-1] % 2 ** levels or zt.shape[-2] % 2 ** levels:
            raise ShapeError(f"latent {tuple(zt.shape[-2:])} not divisible by 2^{levels}")
        b = zt.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        temb = self.time(t).to(zt.dtype)

        h = self.inp(torch.cat([zx, zt], dim=1))
        skips = []
        for m in self.down:
            h = m(h, temb)
            if isinstance(m, TimeResBlock):
                skips.append(h)
        for m in self.mid:
            h = m(h, temb)
        for m in self.up:
            if isinstance(m, TimeResBlock):
                h = torch.cat([h, skips.pop()], dim=1)
            h = m(h, temb)
        return self.out(F.silu(self.out_norm(h)))


def predict(model: RefinerUNet, zx: Tensor, zt: Tensor, t) -> Tensor:
    return model(zx, zt, t)
