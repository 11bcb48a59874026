"""Latent codecs for the refiner: a small from-scratch VAE and a pass-through.

Depth maps are replicated to three channels before encoding and the three
decoded channels are averaged back, so one codec serves image and depth
latents alike. Encoding for the refiner uses the posterior mean.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import ShapeError, Tensor
from .config import CodecConfig


def _norm(c: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, c), c)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, groups: int = 8):
        super().__init__()
        self.norm1 = _norm(c_in, groups)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = _norm(c_out, groups)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        c, g = cfg.base_channels, cfg.groups
        n_down = int(math.log2(cfg.downsample_factor))
        layers: list[nn.Module] = [nn.Conv2d(3, c, 3, padding=1), ResBlock(c, c, g)]
        ch = c
        for i in range(n_down):
            nxt = c * min(2, 2 ** (i + 1))
            layers += [nn.Conv2d(ch, nxt, 3, stride=2, padding=1), ResBlock(nxt, nxt, g)]
            ch = nxt
        layers += [_norm(ch, g), nn.SiLU(), nn.Conv2d(ch, 2 * cfg.latent_channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        mean, logvar = self.net(x).chunk(2, dim=1)
        return mean, logvar.clamp(-20.0, 10.0)


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        c, g = cfg.base_channels, cfg.groups
        n_down = int(math.log2(cfg.downsample_factor))
        ch = c * min(2, 2 ** n_down) if n_down else c
        layers: list[nn.Module] = [nn.Conv2d(cfg.latent_channels, ch, 3, padding=1), ResBlock(ch, ch, g)]
        for i in reversed(range(n_down)):
            nxt = c * min(2, 2 ** i)
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, nxt, 3, padding=1),
                       ResBlock(nxt, nxt, g)]
            ch = nxt
        layers += [_norm(ch, g), nn.SiLU(), nn.Conv2d(ch, 3, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)


def as_three_channel(x: Tensor) -> Tensor:
    if x.shape[1] == 1:
        return x.expand(-1, 3, -1, -1)
    if x.shape[1] != 3:
        raise ShapeError(f"codec input must have 1 or 3 channels, got {tuple(x.shape)}")
    return x


class Codec(nn.Module):
    """``mode='vae'``: learned f-times downsampling; ``mode='identity'``: pass-through."""

    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        cfg = cfg or CodecConfig()
        cfg.validate()
        self.cfg = cfg
        if cfg.mode == "vae":
            self.encoder = Encoder(cfg)
            self.decoder = Decoder(cfg)

    @property
    def factor(self) -> int:
        return self.cfg.downsample_factor if self.cfg.mode == "vae" else 1

    @property
    def latent_channels(self) -> int:
        return self.cfg.latent_channels if self.cfg.mode == "vae" else 3

    def posterior(self, img: Tensor) -> tuple[Tensor, Tensor]:
        img = as_three_channel(img)
        f = self.factor
        if img.shape[-1] % f or img.shape[-2] % f:
            raise ShapeError(f"image {tuple(img.shape[-2:])} not divisible by codec factor {f}")
        return self.encoder(img)

    def encode(self, img: Tensor) -> Tensor:
        """(B, 1|3, H, W) -> (B, c, H/f, W/f), deterministic."""
        if self.cfg.mode == "identity":
            return as_three_channel(img).clone()
        mean, _ = self.posterior(img)
        return mean

    def decode_raw(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.latent_channels:
            raise ShapeError(f"latent has {z.shape[1]} channels, codec expects {self.latent_channels}")
        if self.cfg.mode == "identity":
            return z
        return self.decoder(z)

    def decode(self, z: Tensor) -> Tensor:
        """(B, c, h, w) -> (B, 3, h*f, w*f) clamped to [0, 1]."""
        return self.decode_raw(z).clamp(0.0, 1.0)

    def decode_depth(self, z: Tensor) -> Tensor:
        """Decode and average the three channels: (B, 1, H, W) in [0, 1]."""
        x = self.decode_raw(z)
        # float64 mean: three equal float32 channels average back to themselves exactly
        return x.double().mean(dim=1, keepdim=True).to(x.dtype).clamp(0.0, 1.0)


def kl_divergence(mean: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)), summed per sample, batch-averaged."""
    kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar)
    return kl.flatten(1).sum(1).mean()


def vae_loss(codec: Codec, img: Tensor, generator: torch.Generator | None = None,
             sample: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """(total, recon L1, KL); reparameterized sample when ``sample``."""
    img = as_three_channel(img)
    mean, logvar = codec.posterior(img)
    if sample:
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * noise
    else:
        z = mean
    recon = (codec.decoder(z) - img).abs().mean()
    kl = kl_divergence(mean, logvar)
    total = recon + codec.cfg.kl_weight * kl if codec.cfg.kl_weight else recon
    return total, recon, kl
