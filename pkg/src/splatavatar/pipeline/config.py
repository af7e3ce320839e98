"""Run configuration: a flat ``key = value`` text file with typed validation."""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0

    # body and cameras; the body seed fixes the anchor layout independently of the run seed
    n_points: int = 2400
    body_seed: int = 0
    image_size: int = 64
    camera_radius: float = 3.0
    camera_elevation: float = 0.0
    camera_fov_deg: float = 40.0
    background: float = 1.0

    # synthetic data
    dataset_size: int = 256
    feature_size: int = 16
    feature_channels: int = 64
    feature_seed: int = 1234
    color_noise: float = 0.03

    # constraint ranges (metres)
    disp_body: float = 0.04
    disp_head: float = 0.02
    disp_hand: float = 0.02
    scale_body: float = 0.02
    scale_head: float = 0.01
    scale_hand: float = 0.01
    s_min: float = 1e-4

    # reconstruction network
    subsample_points: int = 600
    uplift_heads: int = 2
    uplift_dim: int = 16
    attn_heads: int = 4
    attn_dim: int = 32
    pe_frequencies: int = 4
    softmax_scaled: bool = True
    upsample_k: int = 8
    self_k: int = 8
    self_blocks: int = 2
    feature_width: int = 64
    shape_hidden: int = 64
    n_shape: int = 10

    # losses
    w_l1: float = 1.0
    w_ssim: float = 0.25
    twin_weight: float = 0.25
    beta_weight: float = 1.0
    twin_regularization: bool = True

    # optimisation
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 4
    uplift_steps: int = 1000
    twin_steps: int = 1000
    fit_lr: float = 0.05
    fit_iters: int = 2000

    # diffusion
    diffusion_points: int = 1000
    timesteps: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02
    p_drop: float = 0.1
    guidance: float = 3.0
    diffusion_steps: int = 3000
    diffusion_lr: float = 1e-3
    denoiser_widths: tuple[int, ...] = (64, 128, 256)
    denoiser_k: int = 8
    t_dim: int = 64

    def __post_init__(self):
        positive = [
            "n_points", "image_size", "dataset_size", "feature_size", "feature_channels",
            "subsample_points", "uplift_heads", "uplift_dim", "attn_heads", "attn_dim",
            "upsample_k", "self_k", "feature_width", "n_shape", "batch_size", "timesteps",
            "diffusion_points", "denoiser_k", "t_dim", "shape_hidden",
        ]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 < self.camera_fov_deg < 180:
            raise ConfigError("camera_fov_deg must lie in (0, 180)")
        if self.subsample_points > self.n_points:
            raise ConfigError("subsample_points cannot exceed n_points")
        if self.feature_channels % self.uplift_heads:
            raise ConfigError("feature_channels must be divisible by uplift_heads")
        if self.feature_width % self.attn_heads or self.attn_dim % self.attn_heads:
            raise ConfigError("feature_width and attn_dim must be divisible by attn_heads")
        if not 0 <= self.p_drop < 1:
            raise ConfigError("p_drop must lie in [0, 1)")
        if self.guidance < 0:
            raise ConfigError("guidance must be non-negative")
        if not 0 < self.beta_1 <= self.beta_T < 1:
            raise ConfigError("need 0 < beta_1 <= beta_T < 1")
        if not 0 <= self.background <= 1:
            raise ConfigError("background must lie in [0, 1]")
        if self.upsample_k > self.subsample_points:
            raise ConfigError("upsample_k cannot exceed subsample_points")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def fov(self) -> float:
        return math.radians(self.camera_fov_deg)


_TYPES = typing.get_type_hints(RunConfig)


def _parse_value(name: str, text: str):
    kind = _TYPES[name]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == tuple[int, ...]:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    return (base or RunConfig()).replace(**values)


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    cfg = RunConfig() if path is None else parse_config(Path(path).read_text(encoding="utf-8"))
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**overrides) if overrides else cfg


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"
