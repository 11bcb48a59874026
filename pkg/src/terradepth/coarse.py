"""DPT-style coarse depth network: ViT encoder, reassemble/resample, fusion.

Hooked token maps are reassembled by patch position (readout token
dropped), resampled to four scales, fused coarse-to-fine with a 2x
upsample per stage, and decoded by a small head into a sigmoid depth map.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import ShapeError, Tensor
from .codec import _norm
from .config import ViTConfig


class PatchEmbed(nn.Module):
    def __init__(self, cfg: ViTConfig, in_chans: int = 3):
        super().__init__()
        self.cfg = cfg
        p, d = cfg.patch_size, cfg.embed_dim
        self.proj = nn.Linear(in_chans * p * p, d)
        n = (cfg.image_size // p) ** 2
        self.readout = nn.Parameter(torch.zeros(1, 1, d))
        self.pos = nn.Parameter(torch.zeros(1, n + 1, d))

    def grid(self, h: int, w: int) -> tuple[int, int]:
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
        return h // p, w // p

    def forward(self, x: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, 1 + N_p, D); token 0 is the readout token."""
        b, _, h, w = x.shape
        gh, gw = self.grid(h, w)
        p = self.cfg.patch_size
        patches = x.unfold(2, p, p).unfold(3, p, p)              # B, C, gh, gw, p, p
        patches = patches.permute(0, 2, 3, 1, 4, 5).reshape(b, gh * gw, -1)
        tokens = torch.cat([self.readout.expand(b, -1, -1), self.proj(patches)], dim=1)
        return tokens + self._pos(gh, gw)

    def _pos(self, gh: int, gw: int) -> Tensor:
        n0 = self.cfg.image_size // self.cfg.patch_size
        if gh == n0 and gw == n0:
            return self.pos
        # other input sizes: resample the positional grid
        grid = self.pos[:, 1:].reshape(1, n0, n0, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(gh, gw), mode="bilinear", align_corners=False)
        return torch.cat([self.pos[:, :1], grid.flatten(2).transpose(1, 2)], dim=1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def reassemble(tokens: Tensor, positions: Tensor, gh: int, gw: int) -> Tensor:
    """Place patch tokens at their stored grid positions: (B, N, D) -> (B, D, gh, gw).

    ``positions[i]`` is the flat patch index of token ``i``; the readout
    token must already be removed.
    """
    b, n, d = tokens.shape
    if n != gh * gw:
        raise ShapeError(f"reassemble: {n} tokens for a {gh}x{gw} grid")
    out = tokens.new_zeros(b, gh * gw, d).index_copy(1, positions, tokens)
    return out.transpose(1, 2).reshape(b, d, gh, gw)


class Resample(nn.Module):
    """1x1 projection to the fusion width, then a stride-adjusting 3x3 conv."""

    def __init__(self, cfg: ViTConfig, scale: int):
        super().__init__()
        p = cfg.patch_size
        self.proj = nn.Conv2d(cfg.embed_dim, cfg.fusion_dim, 1)
        c = cfg.fusion_dim
        if scale >= p:
            if scale % p:
                raise ValueError(f"non-integral stride {scale}/{p}")
            self.resize = nn.Conv2d(c, c, 3, stride=scale // p, padding=1)
        else:
            if p % scale:
                raise ValueError(f"non-integral stride {p}/{scale}")
            r = p // scale
            self.resize = nn.ConvTranspose2d(c, c, 3, stride=r, padding=1, output_padding=r - 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.resize(self.proj(x))


class ResidualConvUnit(nn.Module):
    """Pre-activation residual unit: (norm, GELU, conv) twice."""

    def __init__(self, c: int):
        super().__init__()
        self.norm1 = _norm(c, 8)
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.norm2 = _norm(c, 8)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.gelu(self.norm1(x)))
        return x + self.conv2(F.gelu(self.norm2(h)))


class FusionBlock(nn.Module):
    def __init__(self, c: int, has_skip: bool = True):
        super().__init__()
        # the coarsest stage has nothing to merge
        self.skip_unit = ResidualConvUnit(c) if has_skip else None
        self.unit = ResidualConvUnit(c)
        self.out = nn.Conv2d(c, c, 1)
        # keeps the residual stream, and so the head's logits, at unit scale
        self.out_norm = _norm(c, 8)

    def forward(self, x: Tensor, skip: Tensor | None = None) -> Tensor:
        if (skip is None) != (self.skip_unit is None):
            raise ShapeError("fusion: skip input does not match the block's stage")
        if skip is not None:
            if skip.shape != x.shape:
                raise ShapeError(f"fusion: shape mismatch {tuple(x.shape)} vs {tuple(skip.shape)}")
            x = x + self.skip_unit(skip)
        x = self.unit(x)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.out_norm(self.out(x))


class CoarseDepthNet(nn.Module):
    def __init__(self, cfg: ViTConfig | None = None):
        super().__init__()
        cfg = cfg or ViTConfig()
        cfg.validate()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg)
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        # hooks pair with scales fine -> coarse
        self.resample = nn.ModuleList(Resample(cfg, s) for s in cfg.hook_scales)
        # fusion[0] handles the coarsest map
        self.fusion = nn.ModuleList(FusionBlock(cfg.fusion_dim, has_skip=i > 0) for i in range(len(cfg.hook_scales)))
        c = cfg.fusion_dim
        self.head = nn.Sequential(nn.Conv2d(c, max(c // 2, 1), 3, padding=1), nn.GELU(),
                                  nn.Conv2d(max(c // 2, 1), 1, 1))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.trunc_normal_(self.embed.pos, std=0.02)
        nn.init.trunc_normal_(self.embed.readout, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="linear")
                nn.init.zeros_(m.bias)
        # Start near the constant 0.5 map. The loss ignores scale, so nothing
        # else bounds the decoder gain and large logits drift into saturation.
        nn.init.normal_(self.head[-1].weight, std=1e-3)

    def encode(self, tokens: Tensor, grid: tuple[int, int]) -> list[Tensor]:
        """Hooked feature maps (B, D, H/p, W/p), one per hook layer, shallow first."""
        gh, gw = grid
        positions = torch.arange(gh * gw)
        feats = []
        x = tokens
        hooks = set(self.cfg.hook_layers)
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in hooks:
                feats.append(reassemble(x[:, 1:], positions, gh, gw))
        return feats

    def decode_features(self, feats: list[Tensor]) -> Tensor:
        """Resample + fuse; returns the pre-head feature map."""
        maps = [r(f) for r, f in zip(self.resample, feats)]
        x = None
        for block, m in zip(self.fusion, reversed(maps)):
            x = block(m) if x is None else block(x, m)
        return x

    def forward(self, x: Tensor, return_features: bool = False):
        b, c, h, w = x.shape
        if c != 3:
            raise ShapeError(f"expected 3-channel input, got {c}")
        grid = self.embed.grid(h, w)
        feats = self.encode(self.embed(x), grid)
        pre = self.decode_features(feats)
        y = self.head(pre)
        y = torch.sigmoid(F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False))
        if return_features:
            return y, {"hooks": feats, "pre_head": pre}
        return y


def predict_coarse(x: Tensor, model: CoarseDepthNet | None) -> Tensor:
    """(B, 3, H, W) rgb -> (B, 1, H, W) depth in (0, 1)."""
    if model is None:
        raise ValueError("predict_coarse: model weights are not initialized")
    with torch.no_grad():
        return model(x)
