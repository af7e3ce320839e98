"""Attention blocks that move features between image grids and point clouds.

Tensor layouts follow a ``(..., N, h, 1|k|M, dim)`` convention: a query set of
size N, ``h`` heads, and the attended axis second to last. Leading batch
dimensions broadcast, so point coordinates and kNN graphs can be shared across
a batch of feature tensors.

Every forward accepts an optional ``trace`` dict that is filled with the
intermediate tensors, which the tests use to pin their shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 2
    dim: int = 16  # embedding width d (per head for uplift/upsample, total for self-attention)
    pe_frequencies: int = 4
    scaled: bool = True


def sinusoidal_features(x: torch.Tensor, n_freq: int) -> torch.Tensor:
    """``[x, sin(2^j pi x), cos(2^j pi x)]`` for j < n_freq, concatenated on the last axis."""
    if n_freq == 0:
        return x
    freqs = (2.0 ** torch.arange(n_freq, dtype=x.dtype)) * math.pi
    ang = x[..., :, None] * freqs
    return torch.cat([x, torch.sin(ang).flatten(-2), torch.cos(ang).flatten(-2)], dim=-1)


def gather_rows(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """``x[..., index, :]`` for an N x k index matrix -> ``(..., N, k, c)``."""
    if index.numel() and (index.min() < 0 or index.max() >= x.shape[-2]):
        raise IndexError("neighbour index out of range")
    flat = x.index_select(-2, index.reshape(-1))
    return flat.reshape(*x.shape[:-2], *index.shape, x.shape[-1])


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """``(..., c) -> (..., heads, c / heads)``."""
    if x.shape[-1] % heads:
        raise ValueError(f"width {x.shape[-1]} is not divisible by {heads} heads")
    return x.reshape(*x.shape[:-1], heads, x.shape[-1] // heads)


class PositionalEmbed(nn.Module):
    """Learned projection to ``heads x dim`` with sinusoidal encoding for 3D points.

    ``kind="points"`` expects 3D coordinates and expands them with sinusoids
    before the linear map; ``kind="features"`` maps feature vectors linearly.
    """

    def __init__(self, in_dim: int, heads: int, dim: int, kind: str = "points", pe_frequencies: int = 4):
        super().__init__()
        if kind not in ("points", "features"):
            raise ValueError(f"unknown embedding kind {kind!r}")
        self.kind = kind
        self.in_dim = in_dim
        self.heads = heads
        self.dim = dim
        self.n_freq = pe_frequencies if kind == "points" else 0
        width = in_dim * (1 + 2 * self.n_freq)
        self.linear = nn.Linear(width, heads * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected last dimension {self.in_dim}, got {x.shape[-1]}")
        if self.kind == "points":
            x = sinusoidal_features(x, self.n_freq)
        return self.linear(x).reshape(*x.shape[:-1], self.heads, self.dim)


def _softmax(scores: torch.Tensor, width: int, scaled: bool) -> torch.Tensor:
    if scaled:
        scores = scores / math.sqrt(width)
    return torch.softmax(scores, dim=-1)


def _local_scores(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """``q @ k^T`` for (..., 1, d) queries against (..., k, d) keys.

    With only k neighbours per query, a broadcast product is much cheaper than
    a batched matmul over N * h tiny matrices.
    """
    return (q * k).sum(-1).unsqueeze(-2)


def _local_mix(w: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``w @ v`` for (..., 1, k) weights and (..., k, c) values."""
    return (w.squeeze(-2).unsqueeze(-1) * v).sum(-2).unsqueeze(-2)


class UpliftCrossAttention(nn.Module):
    """Point queries attend over all cells of an image feature grid.

    Queries come from point coordinates, keys from the features, and the values
    are the raw features split across heads; the output keeps the channel count.
    """

    def __init__(self, channels: int, cfg: AttentionConfig):
        super().__init__()
        if channels % cfg.heads:
            raise ValueError(f"channels {channels} not divisible by {cfg.heads} heads")
        self.cfg = cfg
        self.channels = channels
        self.query = PositionalEmbed(3, cfg.heads, cfg.dim, "points", cfg.pe_frequencies)
        self.key = PositionalEmbed(channels, cfg.heads, cfg.dim, "features")

    def forward(self, points: torch.Tensor, features: torch.Tensor, trace: dict | None = None) -> torch.Tensor:
        """
        Args:
            points: (..., N, 3) query coordinates.
            features: (..., M, C) flattened grid cells (see ``flatten_grid``).
        Returns:
            (..., N, C) per-point features.
        """
        if features.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} feature channels, got {features.shape[-1]}")
        cells = features
        h = self.cfg.heads
        q = self.query(points).unsqueeze(-2)  # (..., N, h, 1, d)
        k = self.key(cells).transpose(-2, -3).unsqueeze(-4)  # (..., 1, h, M, d)
        v = split_heads(cells, h).transpose(-2, -3).unsqueeze(-4)  # (..., 1, h, M, C/h)
        kt = k.transpose(-1, -2)
        # same products as q @ kt and w @ v, without broadcasting K and V over N
        scores = torch.einsum("...nhd,...hdm->...nhm", q.squeeze(-2), kt.squeeze(-4)).unsqueeze(-2)
        w = _softmax(scores, self.cfg.dim, self.cfg.scaled)  # (..., N, h, 1, M)
        out = torch.einsum("...nhm,...hmc->...nhc", w.squeeze(-2), v.squeeze(-4)).unsqueeze(-2)  # (..., N, h, 1, C/h)
        flat = out.reshape(*out.shape[:-3], self.channels)
        if trace is not None:
            trace.update(query=q, key_t=kt, value=v, weights=w, heads_out=out, output=flat)
        return flat

    @staticmethod
    def flatten_grid(grid: torch.Tensor) -> torch.Tensor:
        """``(..., H', W', C) -> (..., M, C)`` in row-major cell order."""
        return grid.reshape(*grid.shape[:-3], grid.shape[-3] * grid.shape[-2], grid.shape[-1])


class UpsampleAttention(nn.Module):
    """Each dense point attends over features of its k nearest coarse points.

    Attention weights depend only on coordinates (queries from the dense points,
    keys from the gathered coarse points); values are the coarse features.
    """

    def __init__(self, channels: int, cfg: AttentionConfig):
        super().__init__()
        if channels % cfg.heads:
            raise ValueError(f"feature width {channels} not divisible by {cfg.heads} heads")
        self.cfg = cfg
        self.channels = channels
        self.query = PositionalEmbed(3, cfg.heads, cfg.dim, "points", cfg.pe_frequencies)
        self.key = PositionalEmbed(3, cfg.heads, cfg.dim, "points", cfg.pe_frequencies)

    def forward(
        self,
        points: torch.Tensor,
        coarse_points: torch.Tensor,
        neighbors: torch.Tensor,
        coarse_features: torch.Tensor,
        trace: dict | None = None,
    ) -> torch.Tensor:
        """
        Args:
            points: (N, 3) dense query coordinates.
            coarse_points: (n, 3).
            neighbors: (N, k) indices into the coarse set.
            coarse_features: (..., n, f).
        Returns:
            (..., N, f).
        """
        h = self.cfg.heads
        if coarse_features.shape[-1] != self.channels:
            raise ValueError(f"expected feature width {self.channels}, got {coarse_features.shape[-1]}")
        if neighbors.shape[0] != points.shape[-2]:
            raise ValueError("neighbour matrix rows must match the query points")
        q = self.query(points).unsqueeze(-2)  # (N, h, 1, d)
        k = gather_rows(self.key(coarse_points).flatten(-2), neighbors)  # (N, k, h*d)
        k = split_heads(k, h).transpose(-2, -3)  # (N, h, k, d)
        v = gather_rows(coarse_features, neighbors)  # (..., N, k, f)
        v = split_heads(v, h).transpose(-2, -3)  # (..., N, h, k, f/h)
        kt = k.transpose(-1, -2)
        w = _softmax(_local_scores(q, k), self.cfg.dim, self.cfg.scaled)  # (N, h, 1, k)
        out = _local_mix(w, v)  # (..., N, h, 1, f/h)
        flat = out.reshape(*out.shape[:-3], self.channels)
        if trace is not None:
            trace.update(query=q, key_t=kt, value=v, weights=w, heads_out=out, output=flat)
        return flat


class RelativePositionEmbed(nn.Module):
    """Embeds coordinate differences inside an expanded per-head space.

    Coordinates are first expanded linearly (no bias) to ``heads x dim_h``; the
    difference of two expansions therefore depends only on the coordinate
    difference, and is then passed through a sinusoid-augmented linear map.
    """

    def __init__(self, heads: int, dim_h: int):
        super().__init__()
        self.heads = heads
        self.dim_h = dim_h
        self.expand = nn.Linear(3, heads * dim_h, bias=False)
        self.mix = nn.Linear(3 * dim_h, dim_h)

    def expanded(self, points: torch.Tensor) -> torch.Tensor:
        return self.expand(points).reshape(*points.shape[:-1], self.heads, self.dim_h)

    def forward(self, diff: torch.Tensor) -> torch.Tensor:
        return self.mix(torch.cat([diff, torch.sin(diff), torch.cos(diff)], dim=-1))


class KnnSelfAttention(nn.Module):
    """Self-attention over each point's k nearest neighbours.

    Keys add a feature embedding of the neighbour to an embedding of the
    relative position, which makes the block invariant to global translation.
    No residual is applied here.
    """

    def __init__(self, channels: int, cfg: AttentionConfig):
        super().__init__()
        if channels % cfg.heads:
            raise ValueError(f"feature width {channels} not divisible by {cfg.heads} heads")
        if cfg.dim % cfg.heads:
            raise ValueError(f"embedding width {cfg.dim} not divisible by {cfg.heads} heads")
        self.cfg = cfg
        self.channels = channels
        self.dim_h = cfg.dim // cfg.heads
        self.query = PositionalEmbed(channels, cfg.heads, self.dim_h, "features")
        self.key = PositionalEmbed(channels, cfg.heads, self.dim_h, "features")
        self.rel = RelativePositionEmbed(cfg.heads, self.dim_h)

    def forward(
        self,
        points: torch.Tensor,
        features: torch.Tensor,
        neighbors: torch.Tensor,
        trace: dict | None = None,
    ) -> torch.Tensor:
        """
        Args:
            points: (N, 3).
            features: (..., N, f).
            neighbors: (N, k) self-neighbour indices.
        Returns:
            (..., N, f) attended features.
        """
        h = self.cfg.heads
        if features.shape[-1] != self.channels:
            raise ValueError(f"expected feature width {self.channels}, got {features.shape[-1]}")
        xt = self.rel.expanded(points).unsqueeze(-2)  # (N, h, 1, d/h)
        xt_nb = gather_rows(xt.flatten(-3), neighbors)  # (N, k, h*d/h)
        xt_nb = split_heads(xt_nb, h).transpose(-2, -3)  # (N, h, k, d/h)
        diff = xt - xt_nb  # (N, h, k, d/h)
        pos = self.rel(diff)

        kf = gather_rows(self.key(features).flatten(-2), neighbors)  # (..., N, k, h*d/h)
        kf = split_heads(kf, h).transpose(-2, -3)  # (..., N, h, k, d/h)
        keys = kf + pos
        q = self.query(features).unsqueeze(-2)  # (..., N, h, 1, d/h)
        v = gather_rows(features, neighbors)
        v = split_heads(v, h).transpose(-2, -3)  # (..., N, h, k, f/h)
        kt = keys.transpose(-1, -2)
        w = _softmax(_local_scores(q, keys), self.dim_h, self.cfg.scaled)  # (..., N, h, 1, k)
        out = _local_mix(w, v)
        flat = out.reshape(*out.shape[:-3], self.channels)
        if trace is not None:
            trace.update(
                key_features=kf,
                expanded=xt,
                expanded_neighbors=xt_nb,
                relative=pos,
                keys=keys,
                query=q,
                key_t=kt,
                value=v,
                weights=w,
                heads_out=out,
                output=flat,
            )
        return flat
