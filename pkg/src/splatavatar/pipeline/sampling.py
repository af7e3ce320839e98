"""Text-to-avatar sampling and attribute-alignment scoring."""

from __future__ import annotations

import numpy as np
import torch

from ..diffusion import COLORS, Condition, build_schedule, cfg_sample, denormalize_params, encode_condition, random_attributes
from ..geometry.mannequin import TORSO, BodyModel
from ..heads import ConstraintRanges
from .config import RunConfig
from .data import nearest_color, ranges_from_config
from .training import DiffusionModel


def clamp_to_bounds(params: torch.Tensor, regions, ranges: ConstraintRanges) -> torch.Tensor:
    """Project (..., N, 9) parameters onto the valid Gaussian ranges."""
    disp_b, scale_b = ranges.per_point(regions, params.dtype)
    disp = torch.maximum(torch.minimum(params[..., 0:3], disp_b), -disp_b)
    scale = torch.maximum(torch.minimum(params[..., 3:6], scale_b), torch.full_like(scale_b, ranges.s_min))
    color = params[..., 6:9].clamp(0.0, 1.0)
    return torch.cat([disp, scale, color], dim=-1)


def sample_params(
    model: DiffusionModel,
    body: BodyModel,
    cfg: RunConfig,
    condition: Condition | dict,
    guidance: float,
    seeds,
) -> np.ndarray:
    """Denormalised, bound-respecting parameters, (N, 9) for an int seed or (S, N, 9)."""
    if isinstance(condition, dict):
        condition = encode_condition(condition)
    if not np.allclose(body.anchors, model.points):
        raise ValueError("body anchors do not match the points the denoiser was trained on")
    sched = build_schedule(cfg.timesteps, cfg.beta_1, cfg.beta_T)
    y = cfg_sample(model.net, condition, guidance, sched, seeds, model.graphs)
    x = denormalize_params(y.double(), model.stats)
    x = clamp_to_bounds(x, body.regions, ranges_from_config(cfg))
    return x.float().numpy()


def top_color(params: np.ndarray, body: BodyModel) -> str:
    """Vocabulary colour nearest to the mean torso colour."""
    return nearest_color(np.asarray(params)[body.parts == TORSO, 6:9].mean(0))


def alignment_rate(samples: np.ndarray, prompted: list[str], body: BodyModel) -> float:
    """Fraction of samples whose torso colour matches the prompted top colour."""
    hits = [top_color(p, body) == c for p, c in zip(samples, prompted)]
    return float(np.mean(hits)) if hits else float("nan")


def alignment_prompts(n: int, seed: int) -> list[dict]:
    """Seeded random prompts whose top colour cycles through the vocabulary."""
    rng = np.random.default_rng(seed)
    prompts = [random_attributes(rng) for _ in range(n)]
    for i, p in enumerate(prompts):
        p["top_color"] = COLORS[i % len(COLORS)]
    return prompts


def alignment_study(model: DiffusionModel, body: BodyModel, cfg: RunConfig, prompts: list[dict], guidance: float, seed: int) -> float:
    """Top-colour alignment rate of one sample per prompt, seeded ``seed * 1000 + i``."""
    draws = [sample_params(model, body, cfg, p, guidance, seed * 1000 + i) for i, p in enumerate(prompts)]
    return alignment_rate(np.stack(draws), [p["top_color"] for p in prompts], body)
