"""Training loops for the reconstruction model, its text twin and the denoiser."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ..diffusion import (
    DenoiserConfig,
    DenoiserNet,
    ParamStats,
    build_graphs,
    build_schedule,
    normalize_params,
    train_step_loss,
)
from ..geometry.mannequin import BodyModel
from ..losses import psnr, render_loss
from .config import ConfigError, RunConfig
from .data import SyntheticSample, cameras
from .model import IMAGE, TEXT, ReconstructionNet, model_inputs

log = logging.getLogger(__name__)

FRONT, LEFT, BACK, RIGHT = range(4)
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


class TrainingError(RuntimeError):
    pass


@dataclass
class History:
    losses: list[float] = field(default_factory=list)
    parts: list[dict] = field(default_factory=list)


class DivergenceGuard:
    """Raises once the loss exceeds ``factor`` times the first loss for ``patience`` steps in a row."""

    def __init__(self, factor: float = DIVERGENCE_FACTOR, patience: int = DIVERGENCE_PATIENCE):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.run = 0

    def update(self, step: int, loss: float) -> None:
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        if self.initial is None:
            self.initial = loss
            return
        self.run = self.run + 1 if loss > self.factor * self.initial else 0
        if self.run >= self.patience:
            raise TrainingError(
                f"training diverged: loss {loss:.4g} above {self.factor}x the initial {self.initial:.4g} "
                f"for {self.patience} consecutive steps (step {step})"
            )


def _batches(n: int, batch: int, steps: int, rng: np.random.Generator):
    """Index batches from successive shuffled epochs."""
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if len(order) < batch:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch]
        order = order[batch:]


def _optimizer(net: torch.nn.Module, cfg: RunConfig, lr: float | None = None):
    return torch.optim.AdamW(net.parameters(), lr=lr or cfg.lr, weight_decay=cfg.weight_decay)


def multiview_regularize(twin: ReconstructionNet | None, sample: SyntheticSample | list, cfg: RunConfig) -> torch.Tensor:
    """Render the twin's prediction for each sample's condition from the 4 canonical cameras.

    Returns (4, H, W, 3) for one sample or (B, 4, H, W, 3) for a list. No gradient
    reaches the twin.
    """
    if twin is None:
        raise ConfigError("twin regularization needs a trained twin checkpoint")
    if twin.mode != TEXT:
        raise ConfigError("the regularizing twin must be a text-conditioned model")
    single = isinstance(sample, SyntheticSample)
    samples = [sample] if single else list(sample)
    with torch.no_grad():
        raw, beta = twin(model_inputs(samples, TEXT))
        params, anchors = twin.gaussians(raw, beta)
        views = twin.render(params, anchors, cameras(cfg), background=cfg.background)
    return views[0] if single else views


def _fit_model(
    net: ReconstructionNet,
    samples: list[SyntheticSample],
    cfg: RunConfig,
    steps: int,
    views: list[int],
    extra_targets: torch.Tensor | None,
    tag: int,
    callback=None,
) -> History:
    if len(samples) == 0:
        raise ValueError("empty training set")
    cams = cameras(cfg)
    inputs = model_inputs(samples, net.mode)
    targets = torch.tensor(np.stack([s.images for s in samples]), dtype=torch.float32)[:, views]
    betas = torch.tensor(np.stack([s.beta for s in samples]), dtype=torch.float32)
    if targets.shape[-2] != cfg.image_size:
        raise ValueError(f"dataset images are {targets.shape[-2]} px but the config asks for {cfg.image_size}")
    opt = _optimizer(net, cfg)
    rng = np.random.default_rng([cfg.seed, tag])
    guard = DivergenceGuard()
    hist = History()
    batch = min(cfg.batch_size, len(samples))
    net.train()
    for step, idx in enumerate(_batches(len(samples), batch, steps, rng)):
        idx_t = torch.from_numpy(idx)
        raw, beta = net(inputs[idx_t])
        params, anchors = net.gaussians(raw, beta)
        n_extra = 4 if extra_targets is not None else 0
        all_views = views + list(range(n_extra))
        rgb = net.render(params, anchors, cams, all_views, cfg.background)
        gt = render_loss(rgb[:, : len(views)], targets[idx_t], cfg.w_l1, cfg.w_ssim)
        parts = {"gt": gt.item()}
        loss = gt
        if n_extra:
            twin_loss = render_loss(rgb[:, len(views) :], extra_targets[idx_t], cfg.w_l1, cfg.w_ssim)
            loss = loss + cfg.twin_weight * twin_loss
            parts["twin"] = twin_loss.item()
        if cfg.beta_weight:
            beta_loss = ((beta - betas[idx_t]) ** 2).mean()
            loss = loss + cfg.beta_weight * beta_loss
            parts["beta"] = beta_loss.item()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        value = loss.item()
        guard.update(step, value)
        hist.losses.append(value)
        hist.parts.append(parts)
        if callback:
            callback(step, value)
    net.eval()
    return hist


def train_uplift(
    samples: list[SyntheticSample],
    cfg: RunConfig,
    body: BodyModel,
    twin: ReconstructionNet | None = None,
    steps: int | None = None,
    callback=None,
) -> tuple[ReconstructionNet, History]:
    """Train the image-conditioned model on front views plus, optionally, twin renders."""
    twin_views = None
    if cfg.twin_regularization:
        twin_views = multiview_regularize(twin, samples, cfg)
    torch.manual_seed(cfg.seed)
    net = ReconstructionNet(cfg, body, IMAGE)
    hist = _fit_model(net, samples, cfg, cfg.uplift_steps if steps is None else steps, [FRONT], twin_views, 1, callback)
    return net, hist


def train_text_twin(
    samples: list[SyntheticSample],
    cfg: RunConfig,
    body: BodyModel,
    steps: int | None = None,
    callback=None,
) -> tuple[ReconstructionNet, History]:
    """Train the text-conditioned twin against all four views."""
    torch.manual_seed(cfg.seed + 1)
    net = ReconstructionNet(cfg, body, TEXT)
    hist = _fit_model(net, samples, cfg, cfg.twin_steps if steps is None else steps, [FRONT, LEFT, BACK, RIGHT], None, 2, callback)
    return net, hist


def predict(net: ReconstructionNet, samples: list[SyntheticSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Bounded params (B, N, 9), posed anchors and betas, without gradients."""
    with torch.no_grad():
        raw, beta = net(model_inputs(samples, net.mode))
        params, anchors = net.gaussians(raw, beta)
    return params, anchors, beta


def view_psnr_table(net: ReconstructionNet, samples: list[SyntheticSample], cfg: RunConfig) -> np.ndarray:
    """PSNR of every sample (rows) in every canonical view (columns)."""
    params, anchors, _ = predict(net, samples)
    with torch.no_grad():
        rgb = net.render(params, anchors, cameras(cfg), background=cfg.background)
    out = np.zeros((len(samples), 4))
    for i, s in enumerate(samples):
        for v in range(4):
            out[i, v] = psnr(rgb[i, v], torch.as_tensor(s.images[v]))
    return out


# --------------------------------------------------------------------------- diffusion


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(widths=cfg.denoiser_widths, k=cfg.denoiser_k, t_dim=cfg.t_dim, pe_frequencies=cfg.pe_frequencies)


@dataclass
class DiffusionModel:
    net: DenoiserNet
    stats: ParamStats
    graphs: object
    points: np.ndarray
    history: list[float] = field(default_factory=list)


def diffusion_graphs(points: np.ndarray, cfg: RunConfig):
    return build_graphs(points, levels=len(cfg.denoiser_widths), k=cfg.denoiser_k, seed=cfg.body_seed)


def train_diffusion(
    corpus: np.ndarray,
    conditions: torch.Tensor,
    points: np.ndarray,
    cfg: RunConfig,
    steps: int | None = None,
    callback=None,
) -> DiffusionModel:
    """Fit the denoiser to a (S, N, 9) parameter corpus with (S, 34) condition encodings."""
    corpus = np.asarray(corpus, dtype=np.float32)
    if corpus.ndim != 3 or corpus.shape[-1] != 9:
        raise ValueError(f"corpus must be S x N x 9, got {corpus.shape}")
    if len(corpus) < cfg.batch_size:
        raise ValueError(f"corpus of {len(corpus)} samples is smaller than the batch size {cfg.batch_size}")
    if len(conditions) != len(corpus):
        raise ValueError("need one condition per corpus sample")
    if corpus.shape[1] != len(points):
        raise ValueError("corpus point count does not match the anchor set")
    stats = ParamStats.from_corpus(corpus)
    x_all = normalize_params(torch.from_numpy(corpus), stats).float()
    conds = torch.as_tensor(conditions, dtype=torch.float32)
    sched = build_schedule(cfg.timesteps, cfg.beta_1, cfg.beta_T)
    graphs = diffusion_graphs(points, cfg)
    torch.manual_seed(cfg.seed + 2)
    net = DenoiserNet(denoiser_config(cfg))
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.diffusion_lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed + 3)
    rng = np.random.default_rng([cfg.seed, 3])
    guard = DivergenceGuard()
    n_steps = cfg.diffusion_steps if steps is None else steps
    hist = []
    net.train()
    for step, idx in enumerate(_batches(len(corpus), cfg.batch_size, n_steps, rng)):
        idx_t = torch.from_numpy(idx)
        x0 = x_all[idx_t]
        t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        loss = train_step_loss(x0, t, noise, conds[idx_t], net, graphs, sched, cfg.p_drop, gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        value = loss.item()
        guard.update(step, value)
        hist.append(value)
        if callback:
            callback(step, value)
    net.eval()
    return DiffusionModel(net, stats, graphs, np.asarray(points), hist)
