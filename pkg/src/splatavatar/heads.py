"""Bounded Gaussian-parameter regression and body-shape prediction."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .gaussians import GaussianSet
from .geometry.mesh import BODY, HAND, HEAD


@dataclass(frozen=True)
class ConstraintRanges:
    """Per-region bounds in metres. Head and hands must be no looser than the body."""

    disp_body: float = 0.04
    disp_head: float = 0.02
    disp_hand: float = 0.02
    scale_body: float = 0.02
    scale_head: float = 0.01
    scale_hand: float = 0.01
    s_min: float = 1e-4

    def __post_init__(self):
        if self.disp_head > self.disp_body or self.disp_hand > self.disp_body:
            raise ValueError("head/hand displacement bounds must not exceed the body bound")
        if self.scale_head > self.scale_body or self.scale_hand > self.scale_body:
            raise ValueError("head/hand scale bounds must not exceed the body bound")
        if not 0 < self.s_min < min(self.scale_head, self.scale_hand, self.scale_body):
            raise ValueError("s_min must be positive and below every scale bound")

    def disp_bound(self, region: int) -> float:
        return {BODY: self.disp_body, HEAD: self.disp_head, HAND: self.disp_hand}[region]

    def scale_bound(self, region: int) -> float:
        return {BODY: self.scale_body, HEAD: self.scale_head, HAND: self.scale_hand}[region]

    def per_point(self, regions, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Displacement and scale bounds broadcastable to N x 1."""
        regions = torch.as_tensor(regions, dtype=torch.long)
        if regions.numel() and (regions.min() < 0 or regions.max() > HAND):
            raise ValueError("unknown region label")
        disp = torch.tensor([self.disp_body, self.disp_head, self.disp_hand], dtype=dtype)
        scale = torch.tensor([self.scale_body, self.scale_head, self.scale_hand], dtype=dtype)
        return disp[regions][:, None], scale[regions][:, None]


def constrain(raw: torch.Tensor, regions, ranges: ConstraintRanges) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Map raw ``(..., N, 9)`` outputs to bounded (displacement, scale, color).

    Displacements are ``bound * sin(raw)``, scales ``s_min + (bound - s_min) *
    (sin(raw) + 1) / 2`` and colors ``sigmoid(raw)``; all bounds hold exactly for
    any raw value.
    """
    disp_b, scale_b = ranges.per_point(regions, raw.dtype)
    disp = disp_b * torch.sin(raw[..., 0:3])
    scale = ranges.s_min + (scale_b - ranges.s_min) * 0.5 * (torch.sin(raw[..., 3:6]) + 1.0)
    color = torch.sigmoid(raw[..., 6:9])
    return disp, scale, color


def unconstrain(disp, scale, color, regions, ranges: ConstraintRanges, margin: float = 1e-4) -> torch.Tensor:
    """Raw values that ``constrain`` maps back to the given parameters (clipped inside the bounds)."""
    disp_b, scale_b = ranges.per_point(regions, disp.dtype)
    u = torch.clamp(disp / disp_b, -1 + margin, 1 - margin)
    v = torch.clamp(2 * (scale - ranges.s_min) / (scale_b - ranges.s_min) - 1, -1 + margin, 1 - margin)
    c = torch.clamp(color, margin, 1 - margin)
    return torch.cat([torch.asin(u), torch.asin(v), torch.logit(c)], dim=-1)


class GaussianHead(nn.Module):
    """Linear map from point features to the 9 raw Gaussian outputs."""

    def __init__(self, in_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, 9)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.linear(features)


def regress_gaussians(
    features: torch.Tensor,
    regions,
    ranges: ConstraintRanges,
    head: GaussianHead,
    anchors: torch.Tensor,
    rotation: torch.Tensor,
) -> GaussianSet:
    """Bounded Gaussian parameters for one feature set (N x f)."""
    disp, scale, color = constrain(head(features), regions, ranges)
    return GaussianSet(anchors.to(disp.dtype), disp, scale, color, rotation.to(disp.dtype), torch.as_tensor(regions))


class ShapeMLP(nn.Module):
    """Two-layer perceptron predicting shape coefficients."""

    def __init__(self, in_dim: int, hidden: int = 64, n_shape: int = 10):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_shape)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input length {self.in_dim}, got {x.shape[-1]}")
        return self.fc2(torch.relu(self.fc1(x)))


def shape_input(grid: torch.Tensor) -> torch.Tensor:
    """Spatially averaged channels followed by channel-averaged cells.

    ``(..., H', W', C) -> (..., C + H'W')``.
    """
    v1 = grid.mean(dim=(-3, -2))
    v2 = grid.mean(dim=-1).flatten(-2)
    return torch.cat([v1, v2], dim=-1)


def predict_shape(grid: torch.Tensor, mlp: ShapeMLP) -> torch.Tensor:
    return mlp(shape_input(grid))


def predict_shape_from_text(encoding: torch.Tensor, mlp: ShapeMLP) -> torch.Tensor:
    return mlp(encoding)
