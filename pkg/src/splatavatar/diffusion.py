"""Text-conditioned diffusion over per-point Gaussian parameters.

The denoiser predicts clean parameters (``x0``) directly. It is a point-cloud
U-Net: a shared MLP over each point's k nearest neighbours stands in for 1D
convolutions, and neighbourhood attention replaces strided down/up-sampling.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .attention import AttentionConfig, UpsampleAttention, gather_rows, sinusoidal_features
from .geometry.points import farthest_point_subsample, knn_indices

COLORS = ("red", "brown", "black", "pink", "yellow", "blue", "purple")
VOCABULARY: dict[str, tuple[str, ...]] = {
    "race": ("white", "black", "asian"),
    "gender": ("man", "woman"),
    "hair": ("blonde", "black", "brown", "ginger"),
    "top": ("long-sleeve t-shirt", "t-shirt", "long-sleeve shirt", "shirt"),
    "top_color": COLORS,
    "trouser_color": COLORS,
    "trainer_color": COLORS,
}
CONDITION_DIM = sum(len(v) for v in VOCABULARY.values())


def vocabulary_hash() -> str:
    return hashlib.sha256(json.dumps(VOCABULARY, sort_keys=False).encode("utf-8")).hexdigest()


class SamplingError(RuntimeError):
    pass


# --------------------------------------------------------------------------- conditions


@dataclass(frozen=True)
class Condition:
    attributes: Mapping[str, str] | None
    encoding: torch.Tensor  # CONDITION_DIM

    @property
    def null(self) -> bool:
        return self.attributes is None


def encode_condition(attributes: Mapping[str, str] | None) -> Condition:
    """One-hot encode attribute values in the fixed slot order; ``None`` is the null condition."""
    vec = torch.zeros(CONDITION_DIM)
    if attributes is None:
        return Condition(None, vec)
    unknown = set(attributes) - set(VOCABULARY)
    if unknown:
        raise ValueError(f"unknown attribute slot(s): {sorted(unknown)}")
    offset = 0
    for slot, values in VOCABULARY.items():
        if slot not in attributes:
            raise ValueError(f"missing attribute {slot!r}")
        value = attributes[slot]
        if value not in values:
            raise ValueError(f"unknown value {value!r} for {slot!r}; expected one of {values}")
        vec[offset + values.index(value)] = 1.0
        offset += len(values)
    return Condition(dict(attributes), vec)


def random_attributes(rng: np.random.Generator) -> dict[str, str]:
    return {slot: values[rng.integers(len(values))] for slot, values in VOCABULARY.items()}


# --------------------------------------------------------------------------- normalisation


@dataclass(frozen=True)
class ParamStats:
    x_min: np.ndarray  # per channel
    x_max: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.x_max) <= np.asarray(self.x_min)):
            raise ValueError("every channel needs x_max > x_min")

    @classmethod
    def from_corpus(cls, corpus: np.ndarray) -> "ParamStats":
        flat = np.asarray(corpus, dtype=np.float64).reshape(-1, np.shape(corpus)[-1])
        lo, hi = flat.min(0), flat.max(0)
        # a constant channel would make the range degenerate
        hi = np.where(hi > lo, hi, lo + 1e-6)
        return cls(lo, hi)


def normalize_params(x, stats: ParamStats, return_clamped: bool = False):
    """``2 (x - x_min) / (x_max - x_min) - 1`` per channel, clamping out-of-range inputs."""
    t = torch.as_tensor(x)
    lo = torch.as_tensor(stats.x_min, dtype=t.dtype)
    hi = torch.as_tensor(stats.x_max, dtype=t.dtype)
    clamped = int(((t < lo) | (t > hi)).sum())
    t = torch.minimum(torch.maximum(t, lo), hi)
    y = 2 * (t - lo) / (hi - lo) - 1
    return (y, clamped) if return_clamped else y


def denormalize_params(y, stats: ParamStats):
    """``(y + 1) / 2 (x_max - x_min) + x_min`` per channel."""
    t = torch.as_tensor(y)
    lo = torch.as_tensor(stats.x_min, dtype=t.dtype)
    hi = torch.as_tensor(stats.x_max, dtype=t.dtype)
    return (t + 1) / 2 * (hi - lo) + lo


# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # T, float64; index t-1 holds step t

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.exp(np.cumsum(np.log1p(-self.betas)))

    def alpha_bar_at(self, t: int) -> float:
        """``alpha_bar_t`` with the convention ``alpha_bar_0 = 1``."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def build_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 1 or not 0 < beta_1 <= beta_T < 1:
        raise ValueError("need T >= 1 and 0 < beta_1 <= beta_T < 1")
    betas = np.array([beta_1]) if T == 1 else np.linspace(beta_1, beta_T, T)
    return NoiseSchedule(betas.astype(np.float64))


def _check_t(t, sched: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (t.min() < 1 or t.max() > sched.T):
        raise ValueError(f"timestep out of range [1, {sched.T}]")
    return t


def q_sample(x0: torch.Tensor, t, noise: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward diffusion ``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise``; ``t`` is scalar or per-batch."""
    t = _check_t(t, sched)
    ab = torch.as_tensor(sched.alpha_bar, dtype=x0.dtype)[t - 1]
    while ab.dim() < x0.dim():
        ab = ab[..., None]
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


# --------------------------------------------------------------------------- denoiser


@dataclass
class DenoiserGraphs:
    """Point levels and neighbour graphs for one point-cloud topology.

    ``points[l]`` are the level-l coordinates; ``self_knn[l]`` self neighbours;
    ``down[l]`` maps level l+1 points to their neighbours in level l, ``up[l]``
    maps level l points to neighbours in level l+1.
    """

    points: list[torch.Tensor]
    origin: list[np.ndarray]
    self_knn: list[torch.Tensor]
    down: list[torch.Tensor]
    up: list[torch.Tensor]

    @property
    def sizes(self) -> list[int]:
        return [len(p) for p in self.points]

    def permuted(self, perm: np.ndarray) -> "DenoiserGraphs":
        """Same graphs with the finest level relabelled by ``perm`` (new i = old perm[i])."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        inv_t = torch.as_tensor(inv)
        perm_t = torch.as_tensor(perm)
        points = [self.points[0][perm_t]] + self.points[1:]
        origin = [np.asarray(self.origin[0])[perm]] + self.origin[1:]
        self_knn = [inv_t[self.self_knn[0][perm_t]]] + self.self_knn[1:]
        down = list(self.down)
        up = list(self.up)
        if down:
            down[0] = inv_t[self.down[0]]
            up[0] = self.up[0][perm_t]
        return DenoiserGraphs(points, origin, self_knn, down, up)


def build_graphs(points: np.ndarray, levels: int = 3, factor: int = 4, k: int = 8, seed: int = 0) -> DenoiserGraphs:
    pts = [np.asarray(points, dtype=np.float64)]
    origin = [np.arange(len(points))]
    for _ in range(levels - 1):
        sub, idx = farthest_point_subsample(pts[-1], max(len(pts[-1]) // factor, k), seed)
        pts.append(sub)
        origin.append(idx)
    self_knn = [torch.as_tensor(knn_indices(p, None, min(k, len(p))).indices) for p in pts]
    down = [torch.as_tensor(knn_indices(pts[i + 1], pts[i], min(k, len(pts[i]))).indices) for i in range(levels - 1)]
    up = [torch.as_tensor(knn_indices(pts[i], pts[i + 1], min(k, len(pts[i + 1]))).indices) for i in range(levels - 1)]
    return DenoiserGraphs([torch.as_tensor(p, dtype=torch.float32) for p in pts], origin, self_knn, down, up)


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    ang = t.to(dtype)[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class KnnMLP(nn.Module):
    """Residual block: concatenate each point's neighbour features (in graph row
    order) and mix them with a shared two-layer perceptron."""

    def __init__(self, width: int, k: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(k * width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, h: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        nb = gather_rows(self.norm(h), neighbors).flatten(-2)
        return h + self.fc2(nn.functional.silu(self.fc1(nb)))


@dataclass(frozen=True)
class DenoiserConfig:
    widths: tuple[int, ...] = (64, 128, 256)
    k: int = 8
    t_dim: int = 64
    heads: int = 4
    attn_dim: int = 16
    pe_frequencies: int = 4


class DenoiserNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        n_lv = len(w)
        pe_width = 3 * (1 + 2 * cfg.pe_frequencies)
        self.inp = nn.Linear(9 + pe_width, w[0])
        self.t_mlp = nn.Sequential(nn.Linear(cfg.t_dim, cfg.t_dim), nn.SiLU(), nn.Linear(cfg.t_dim, cfg.t_dim))
        self.cond_proj = nn.Linear(CONDITION_DIM, cfg.t_dim)
        self.enc_emb = nn.ModuleList(nn.Linear(cfg.t_dim, w[i]) for i in range(n_lv))
        self.dec_emb = nn.ModuleList(nn.Linear(cfg.t_dim, w[i]) for i in range(n_lv - 1))
        self.enc = nn.ModuleList(KnnMLP(w[i], cfg.k) for i in range(n_lv))
        self.mid = KnnMLP(w[-1], cfg.k)
        acfg = AttentionConfig(cfg.heads, cfg.attn_dim, cfg.pe_frequencies)
        self.down_attn = nn.ModuleList(UpsampleAttention(w[i], acfg) for i in range(n_lv - 1))
        self.down_proj = nn.ModuleList(nn.Linear(w[i], w[i + 1]) for i in range(n_lv - 1))
        self.up_attn = nn.ModuleList(UpsampleAttention(w[i + 1], acfg) for i in range(n_lv - 1))
        self.up_proj = nn.ModuleList(nn.Linear(w[i + 1] + w[i], w[i]) for i in range(n_lv - 1))
        self.dec = nn.ModuleList(KnnMLP(w[i], cfg.k) for i in range(n_lv - 1))
        self.out_norm = nn.LayerNorm(w[0])
        self.out = nn.Linear(w[0], 9)

    def forward(self, x_t: torch.Tensor, t, cond: torch.Tensor, graphs: DenoiserGraphs) -> torch.Tensor:
        """
        Args:
            x_t: (B, N, 9) noisy normalised parameters.
            t: (B,) or scalar timestep in [1, T].
            cond: (B, CONDITION_DIM) encodings, zero rows for the null condition.
        Returns:
            (B, N, 9) predicted clean parameters.
        """
        n_lv = len(self.cfg.widths)
        if len(graphs.points) != n_lv or graphs.sizes[0] != x_t.shape[-2]:
            raise ValueError("graphs do not match the network levels or point count")
        bsz = x_t.shape[0]
        t = torch.as_tensor(t).reshape(-1).expand(bsz)
        emb = self.t_mlp(timestep_embedding(t, self.cfg.t_dim, x_t.dtype)) + self.cond_proj(cond)
        emb = emb[:, None, :]

        pe = sinusoidal_features(graphs.points[0], self.cfg.pe_frequencies).to(x_t.dtype)
        h = self.inp(torch.cat([x_t, pe.expand(bsz, -1, -1)], dim=-1))
        skips = []
        for lv in range(n_lv):
            h = self.enc[lv](h + self.enc_emb[lv](emb), graphs.self_knn[lv])
            if lv < n_lv - 1:
                skips.append(h)
                h = self.down_attn[lv](graphs.points[lv + 1], graphs.points[lv], graphs.down[lv], h)
                h = self.down_proj[lv](h)
        h = self.mid(h, graphs.self_knn[-1])
        for lv in reversed(range(n_lv - 1)):
            h = self.up_attn[lv](graphs.points[lv], graphs.points[lv + 1], graphs.up[lv], h)
            h = self.up_proj[lv](torch.cat([h, skips[lv]], dim=-1))
            h = self.dec[lv](h + self.dec_emb[lv](emb), graphs.self_knn[lv])
        return self.out(self.out_norm(h))


def denoiser_forward(x_t, t, cond, graphs: DenoiserGraphs, net: DenoiserNet) -> torch.Tensor:
    if isinstance(cond, Condition):
        cond = cond.encoding
    cond = torch.as_tensor(cond, dtype=x_t.dtype)
    squeeze = x_t.dim() == 2
    if squeeze:
        x_t = x_t[None]
    if cond.dim() == 1:
        cond = cond[None].expand(x_t.shape[0], -1)
    out = net(x_t, t, cond, graphs)
    return out[0] if squeeze else out


# --------------------------------------------------------------------------- training and sampling


def train_step_loss(
    x0: torch.Tensor,
    t,
    noise: torch.Tensor,
    cond: torch.Tensor,
    net: DenoiserNet,
    graphs: DenoiserGraphs,
    sched: NoiseSchedule,
    p_drop: float = 0.1,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean squared error between ``x0`` and its prediction from ``q_sample(x0, t, noise)``.

    Each batch row's condition is replaced by the null (zero) encoding with
    probability ``p_drop``.
    """
    if x0.dim() == 2:
        x0, noise = x0[None], noise[None]
    cond = torch.as_tensor(cond, dtype=x0.dtype)
    if cond.dim() == 1:
        cond = cond[None].expand(x0.shape[0], -1)
    if p_drop > 0:
        keep = torch.rand(x0.shape[0], generator=generator) >= p_drop
        cond = cond * keep[:, None].to(cond.dtype)
    t = _check_t(t, sched).reshape(-1).expand(x0.shape[0])
    x_t = q_sample(x0, t, noise, sched)
    pred = net(x_t, t, cond, graphs)
    return ((pred - x0) ** 2).mean()


def guided_x0(x0_cond: torch.Tensor, x0_uncond: torch.Tensor, w: float) -> torch.Tensor:
    return x0_uncond + w * (x0_cond - x0_uncond)


def posterior_step(x_t: torch.Tensor, x0_hat: torch.Tensor, t: int, sched: NoiseSchedule, z: torch.Tensor) -> torch.Tensor:
    """One ancestral step ``x_{t-1} = mu + sigma_t z`` (``z`` ignored at t = 1)."""
    beta = float(sched.betas[t - 1])
    alpha = 1.0 - beta
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t - 1)
    mu = (math.sqrt(ab_prev) * beta * x0_hat + math.sqrt(alpha) * (1 - ab_prev) * x_t) / (1 - ab_t)
    if t == 1:
        return mu
    sigma = math.sqrt(beta * (1 - ab_prev) / (1 - ab_t))
    return mu + sigma * z


@torch.no_grad()
def cfg_sample(
    net: DenoiserNet,
    cond,
    w: float,
    sched: NoiseSchedule,
    seeds: Sequence[int] | int,
    graphs: DenoiserGraphs,
    trace: list | None = None,
) -> torch.Tensor:
    """Classifier-free guided ancestral sampling of normalised parameters.

    One sample per seed; each sample draws its initial noise and per-step noise
    from its own generator, so a sample does not depend on the batch it is in.
    ``cond`` is a Condition, an encoding, or a (B, D) stack matching ``seeds``.
    Returns (B, N, 9), or (N, 9) for a single integer seed.
    """
    if w < 0:
        raise ValueError("guidance scale must be non-negative")
    single = isinstance(seeds, int)
    seeds = [seeds] if single else list(seeds)
    bsz = len(seeds)
    n = graphs.sizes[0]
    if isinstance(cond, Condition):
        cond = cond.encoding
    cond = torch.as_tensor(cond, dtype=torch.float32)
    if cond.dim() == 1:
        cond = cond[None].expand(bsz, -1)
    null = torch.zeros_like(cond)
    both = torch.cat([cond, null], dim=0)
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]

    x = torch.stack([torch.randn(n, 9, generator=g) for g in gens])
    for t in range(sched.T, 0, -1):
        tt = torch.full((2 * bsz,), t, dtype=torch.long)
        pred = net(torch.cat([x, x], dim=0), tt, both, graphs)
        x0_c, x0_u = pred[:bsz], pred[bsz:]
        x0_hat = guided_x0(x0_c, x0_u, w)
        if not torch.isfinite(x0_hat).all():
            raise SamplingError(f"non-finite denoiser output at step {t}; check the checkpoint weights")
        if trace is not None:
            trace.append((t, x0_c.clone(), x0_u.clone()))
        x0_hat = x0_hat.clamp(-1.0, 1.0)
        z = torch.stack([torch.randn(n, 9, generator=g) for g in gens]) if t > 1 else None
        x = posterior_step(x, x0_hat, t, sched, z)
    return x[0] if single else x
