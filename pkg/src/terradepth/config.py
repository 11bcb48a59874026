"""Dataclass configs for every stage, plus strict JSON loading.

All configs are plain frozen-ish dataclasses with validated defaults.
``RunConfig`` aggregates them and is what the CLI reads from JSON.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass
class TerrainConfig:
    tile_size: int = 64
    roughness: float = 0.55
    seed: int = 42
    count: int = 512
    sun_azimuth_deg: float = 315.0
    sun_elevation_deg: float = 45.0
    # vertical exaggeration: heights in [0, 1] become z_factor pixel units
    z_factor: float = 16.0

    def validate(self) -> None:
        _require(self.tile_size >= 2, f"tile_size must be >= 2, got {self.tile_size}")
        _require(0.0 < self.roughness < 1.0, f"roughness must be in (0, 1), got {self.roughness}")
        _require(self.count >= 1, f"count must be >= 1, got {self.count}")
        _require(0.0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer")
        _require(0.0 < self.sun_elevation_deg <= 90.0, "sun_elevation_deg must be in (0, 90]")
        _require(self.z_factor > 0, "z_factor must be positive")


@dataclass
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: int = 4
    hook_layers: tuple[int, ...] = (2, 4, 6, 8)
    fusion_dim: int = 64
    hook_scales: tuple[int, ...] = (4, 8, 16, 32)

    def validate(self) -> None:
        H, p = self.image_size, self.patch_size
        _require(H % p == 0, f"image_size {H} not divisible by patch_size {p}")
        _require(self.embed_dim % self.heads == 0,
                 f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        _require(len(self.hook_layers) == 4, f"need 4 hook layers, got {list(self.hook_layers)}")
        _require(len(self.hook_scales) == 4, f"need 4 hook scales, got {list(self.hook_scales)}")
        _require(all(1 <= h <= self.depth for h in self.hook_layers),
                 f"hook_layers {list(self.hook_layers)} outside [1, {self.depth}]")
        _require(list(self.hook_layers) == sorted(set(self.hook_layers)),
                 "hook_layers must be strictly increasing")
        s = list(self.hook_scales)
        _require(all(b == 2 * a for a, b in zip(s, s[1:])),
                 f"hook_scales must double fine->coarse, got {s}")
        for sc in s:
            _require(H % sc == 0, f"hook scale {sc} does not divide image_size {H}")
            if sc < p:
                _require(p % sc == 0, f"non-integral upsample stride p/s = {p}/{sc}")
            else:
                _require(sc % p == 0, f"non-integral downsample stride s/p = {sc}/{p}")


@dataclass
class CodecConfig:
    mode: str = "vae"
    downsample_factor: int = 4
    latent_channels: int = 4
    base_channels: int = 32
    kl_weight: float = 1e-6
    groups: int = 8

    def validate(self) -> None:
        _require(self.mode in ("vae", "identity"), f"codec mode must be vae|identity, got {self.mode!r}")
        f = self.downsample_factor
        _require(f >= 1 and (f & (f - 1)) == 0, f"downsample_factor must be a power of 2, got {f}")
        _require(self.latent_channels >= 1, "latent_channels must be >= 1")
        _require(self.kl_weight >= 0, "kl_weight must be >= 0")


@dataclass
class HdnConfig:
    grid_levels: tuple[int, ...] = (1, 2, 4)
    range_bins: int = 4
    quantile_bins: int = 4
    min_context_size: int = 16
    mad_floor: float = 1e-6

    def validate(self) -> None:
        _require(len(self.grid_levels) >= 1 and all(k >= 1 for k in self.grid_levels),
                 f"grid_levels must be >= 1, got {list(self.grid_levels)}")
        _require(self.range_bins >= 1 and self.quantile_bins >= 1, "bin counts must be >= 1")
        _require(self.min_context_size >= 1, "min_context_size must be >= 1")
        _require(self.mad_floor > 0, "mad_floor must be positive")


@dataclass
class UNetConfig:
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 128
    groups: int = 8
    bottleneck_attention: bool = True

    def validate(self) -> None:
        _require(len(self.channel_mults) >= 1, "channel_mults must be non-empty")
        _require(self.time_embed_dim % 2 == 0, "time_embed_dim must be even")
        for m in self.channel_mults:
            _require((self.base_channels * m) % self.groups == 0,
                     f"channels {self.base_channels * m} not divisible by groups {self.groups}")


@dataclass
class Stage1Config:
    lr: float = 5e-5
    weight_decay: float = 1e-4
    plateau_factor: float = 0.6
    patience: int = 5
    epochs: int = 40


@dataclass
class Stage2Config:
    lr: float = 1e-4
    weight_decay: float = 0.0
    plateau_factor: float = 0.5
    patience: int = 5
    epochs: int = 40


@dataclass
class TrainConfig:
    seed: int = 42
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    folds: int = 5
    T: int = 6
    epsilon: float = 0.8
    batch_size: int = 8
    vae_epochs: int = 10
    vae_lr: float = 1e-3

    def validate(self) -> None:
        _require(self.folds >= 2, f"folds must be >= 2, got {self.folds}")
        _require(self.T >= 2, f"T must be >= 2, got {self.T}")
        _require(0.0 < self.epsilon < 1.0, f"epsilon must be in (0, 1), got {self.epsilon}")
        _require(self.batch_size >= 1, "batch_size must be >= 1")
        for name, st in (("stage1", self.stage1), ("stage2", self.stage2)):
            _require(st.patience >= 1, f"{name}.patience must be >= 1")
            _require(0.0 < st.plateau_factor < 1.0, f"{name}.plateau_factor must be in (0, 1)")
            _require(st.lr > 0, f"{name}.lr must be positive")
            _require(st.epochs >= 1, f"{name}.epochs must be >= 1")
        _require(self.vae_epochs >= 1, "vae_epochs must be >= 1")


@dataclass
class RunConfig:
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    hdn: HdnConfig = field(default_factory=HdnConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            getattr(self, f.name).validate()
        _require(self.vit.image_size == self.terrain.tile_size,
                 f"vit.image_size {self.vit.image_size} != terrain.tile_size {self.terrain.tile_size}")
        if self.codec.mode == "vae":
            _require(self.terrain.tile_size % self.codec.downsample_factor == 0,
                     "tile_size not divisible by codec downsample_factor")

    def to_dict(self) -> dict[str, Any]:
        return to_dict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def from_dict(cls: type, data: dict[str, Any], where: str = "") -> Any:
    """Build dataclass ``cls`` from ``data``; unknown keys are an error."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = from_dict(tp, value, f"{where}{key}.")
        else:
            kwargs[key] = _coerce(tp, value, where + key)
    return cls(**kwargs)


def _coerce(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        (inner, _) = typing.get_args(tp)
        return tuple(_coerce(inner, v, where) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = from_dict(RunConfig, data)
    cfg.validate()
    return cfg
