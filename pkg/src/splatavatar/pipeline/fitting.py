"""Per-subject Gaussian fitting against multi-view renders."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ..gaussians import GaussianSet
from ..geometry.camera import Camera
from ..geometry.mannequin import BodyModel
from ..heads import ConstraintRanges, constrain
from ..losses import psnr, render_loss
from ..rasterizer import render_batch

log = logging.getLogger(__name__)


class FittingError(RuntimeError):
    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class FitResult:
    gaussians: GaussianSet
    raw: torch.Tensor
    losses: list[float] = field(default_factory=list)

    def params(self) -> np.ndarray:
        return self.gaussians.params().detach().numpy()


def fit_gaussians(
    targets,
    cams: list[Camera],
    body: BodyModel,
    ranges: ConstraintRanges,
    iters: int = 2000,
    lr: float = 0.05,
    w_l1: float = 1.0,
    w_ssim: float = 0.25,
    beta=None,
    background: float = 1.0,
    callback=None,
) -> FitResult:
    """Fit displacements, scales and colours to ``targets`` (V x H x W x 3).

    Optimises the unconstrained head outputs with Adam from the neutral
    initialisation (all raw values zero). Opacity and rotations stay fixed.
    """
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.float32)
    anchors = torch.as_tensor(body.anchors if beta is None else body.posed(beta), dtype=torch.float32)
    rotation = torch.as_tensor(body.rotations, dtype=torch.float32)
    regions = torch.as_tensor(body.regions)
    raw = torch.zeros(body.n_points, 9, requires_grad=True)
    opt = torch.optim.Adam([raw], lr=lr)
    n_view = len(cams)
    bg = (background,) * 3
    losses = []

    def make(raw_values):
        disp, scale, color = constrain(raw_values, regions, ranges)
        return GaussianSet(anchors, disp, scale, color, rotation, regions)

    for it in range(iters):
        g = make(raw)
        rgb, _ = render_batch(
            g.positions[None].expand(n_view, -1, -1),
            g.scale[None].expand(n_view, -1, -1),
            rotation,
            g.color[None].expand(n_view, -1, -1),
            cams,
            bg,
        )
        loss = render_loss(rgb, targets, w_l1, w_ssim)
        if not torch.isfinite(loss):
            raise FittingError(
                f"non-finite loss at iteration {it}",
                {"iteration": it, "raw": raw.detach().clone(), "losses": list(losses)},
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if callback:
            callback(it, losses[-1])
    return FitResult(make(raw.detach()), raw.detach(), losses)


def view_psnrs(g: GaussianSet, cams: list[Camera], targets, background: float = 1.0) -> list[float]:
    n = len(cams)
    with torch.no_grad():
        rgb, _ = render_batch(
            g.positions[None].expand(n, -1, -1),
            g.scale[None].expand(n, -1, -1),
            g.rotation,
            g.color[None].expand(n, -1, -1),
            cams,
            (background,) * 3,
        )
    targets = torch.as_tensor(np.asarray(targets), dtype=rgb.dtype)
    return [psnr(rgb[i], targets[i]) for i in range(n)]
