"""Feed-forward reconstruction network: feature grid -> bounded Gaussians + shape."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..attention import (
    AttentionConfig,
    KnnSelfAttention,
    UpliftCrossAttention,
    UpsampleAttention,
    sinusoidal_features,
)
from ..diffusion import CONDITION_DIM
from ..geometry.camera import Camera
from ..geometry.mannequin import BodyModel
from ..geometry.points import farthest_point_subsample, knn_indices
from ..heads import ConstraintRanges, GaussianHead, ShapeMLP, constrain, shape_input
from ..rasterizer import render_batch
from .config import RunConfig
from .data import ranges_from_config

IMAGE, TEXT = "image", "text"


class SelfBlock(nn.Module):
    """kNN self-attention and a pointwise feed-forward layer, both residual."""

    def __init__(self, width: int, cfg: AttentionConfig):
        super().__init__()
        self.attn = KnnSelfAttention(width, cfg)
        self.norm1 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))
        self.norm2 = nn.LayerNorm(width)

    def forward(self, points, h, neighbors):
        h = self.norm1(h + self.attn(points, h, neighbors))
        return self.norm2(h + self.ffn(h))


class ReconstructionNet(nn.Module):
    """Uplift -> upsample -> stacked self-attention -> Gaussian and shape heads.

    ``mode="image"`` consumes (B, H', W', C) feature grids. ``mode="text"`` is
    the text twin: the grid is a single cell holding the condition encoding.
    """

    def __init__(self, cfg: RunConfig, body: BodyModel, mode: str = IMAGE):
        super().__init__()
        if mode not in (IMAGE, TEXT):
            raise ValueError(f"unknown model mode {mode!r}")
        self.mode = mode
        self.cfg = cfg
        channels = cfg.feature_channels if mode == IMAGE else CONDITION_DIM
        if channels % cfg.uplift_heads:
            raise ValueError(f"{channels} input channels not divisible by {cfg.uplift_heads} uplift heads")
        self.channels = channels
        width = cfg.feature_width

        anchors = body.anchors
        _, sub = farthest_point_subsample(anchors, cfg.subsample_points, cfg.body_seed)
        coarse = anchors[sub]
        self.register_buffer("points", torch.tensor(anchors, dtype=torch.float32))
        self.register_buffer("coarse", torch.tensor(coarse, dtype=torch.float32))
        up = knn_indices(anchors, coarse, cfg.upsample_k).indices
        nb = knn_indices(anchors, None, cfg.self_k).indices
        self.register_buffer("up_knn", torch.tensor(up, dtype=torch.long))
        self.register_buffer("self_knn", torch.tensor(nb, dtype=torch.long))
        self.register_buffer("regions", torch.tensor(body.regions, dtype=torch.long))
        self.register_buffer("rotation", torch.tensor(body.rotations, dtype=torch.float32))
        self.register_buffer("basis", torch.tensor(body.anchor_basis(), dtype=torch.float32))

        up_cfg = AttentionConfig(cfg.uplift_heads, cfg.uplift_dim, cfg.pe_frequencies, cfg.softmax_scaled)
        self.uplift = UpliftCrossAttention(channels, up_cfg)
        self.lift_proj = nn.Sequential(nn.Linear(channels, width), nn.LayerNorm(width))
        ups_cfg = AttentionConfig(cfg.attn_heads, cfg.uplift_dim, cfg.pe_frequencies, cfg.softmax_scaled)
        self.upsample = UpsampleAttention(width, ups_cfg)
        # lets points tell themselves apart even when the uplift sees one cell
        self.point_pe = nn.Linear(3 * (1 + 2 * cfg.pe_frequencies), width)
        self.pe_norm = nn.LayerNorm(width)
        sa_cfg = AttentionConfig(cfg.attn_heads, cfg.attn_dim, cfg.pe_frequencies, cfg.softmax_scaled)
        self.blocks = nn.ModuleList(SelfBlock(width, sa_cfg) for _ in range(cfg.self_blocks))
        self.head = GaussianHead(width)
        shape_in = channels + cfg.feature_size**2 if mode == IMAGE else CONDITION_DIM
        self.shape = ShapeMLP(shape_in, cfg.shape_hidden, cfg.n_shape)
        self.ranges: ConstraintRanges = ranges_from_config(cfg)

    def forward(self, inputs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            inputs: (B, H', W', C) feature grids, or (B, 34) encodings in text mode.
        Returns:
            raw (B, N, 9) head outputs and beta (B, n_shape).
        """
        if self.mode == TEXT:
            if inputs.shape[-1] != CONDITION_DIM:
                raise ValueError(f"expected {CONDITION_DIM}-long encodings, got {inputs.shape[-1]}")
            grid = inputs[:, None, None, :]
            beta = self.shape(inputs)
        else:
            grid = inputs
            beta = self.shape(shape_input(grid))
        cells = UpliftCrossAttention.flatten_grid(grid)
        h = self.lift_proj(self.uplift(self.coarse, cells))  # (B, n, f)
        h = self.upsample(self.points, self.coarse, self.up_knn, h)  # (B, N, f)
        pe = self.point_pe(sinusoidal_features(self.points, self.cfg.pe_frequencies))
        h = self.pe_norm(h + pe)
        for block in self.blocks:
            h = block(self.points, h, self.self_knn)
        return self.head(h), beta

    def gaussians(self, raw: torch.Tensor, beta: torch.Tensor):
        """Bounded parameters and posed anchors: (params (B, N, 9), anchors (B, N, 3))."""
        disp, scale, color = constrain(raw, self.regions, self.ranges)
        anchors = self.points + torch.einsum("nab,kb->kna", self.basis, beta)
        return torch.cat([disp, scale, color], dim=-1), anchors

    def render(self, params: torch.Tensor, anchors: torch.Tensor, cams: list[Camera], views=None, background: float = 1.0):
        """Render each batch item through the selected camera indices.

        Returns (B, V, H, W, 3).
        """
        views = list(range(len(cams))) if views is None else list(views)
        b, v = params.shape[0], len(views)
        pos = (anchors + params[..., 0:3])[:, None].expand(-1, v, -1, -1).reshape(b * v, -1, 3)
        scale = params[..., 3:6][:, None].expand(-1, v, -1, -1).reshape(b * v, -1, 3)
        color = params[..., 6:9][:, None].expand(-1, v, -1, -1).reshape(b * v, -1, 3)
        cam_list = [cams[i] for i in views] * b
        rgb, _ = render_batch(pos, scale, self.rotation, color, cam_list, (background,) * 3)
        return rgb.reshape(b, v, *rgb.shape[1:])


def model_inputs(samples, mode: str) -> torch.Tensor:
    if mode == TEXT:
        return torch.stack([s.condition.encoding for s in samples]).float()
    return torch.tensor(np.stack([s.feature_grid for s in samples]), dtype=torch.float32)
