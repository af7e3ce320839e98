"""Differentiable CPU Gaussian splatting.

Splats are projected with the usual EWA linearisation, truncated to a 3-sigma
square per splat and alpha-composited front to back. The implementation is a
sparse (splat, pixel) pair list so that autograd handles the backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .gaussians import GaussianSet
from .geometry.camera import Camera

DILATION = 0.3  # px^2 added to the 2D covariance diagonal
ALPHA_CAP = 0.99
T_EPS = 1e-4  # transmittance below which compositing stops


@dataclass
class Image:
    rgb: torch.Tensor  # H x W x 3
    alpha: torch.Tensor  # H x W

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class Splats2D:
    """Projected splats of one or more images, sorted by (image, depth, index)."""

    image: torch.Tensor  # S, image id
    index: torch.Tensor  # S, source point index
    mean: torch.Tensor  # S x 2 (pixels)
    cov2d: torch.Tensor  # S x 2 x 2
    color: torch.Tensor  # S x 3
    depth: torch.Tensor  # S

    def __len__(self) -> int:
        return self.mean.shape[0]


def _camera_tensors(cams: Sequence[Camera], dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    rots, trans, focal, pp = [], [], [], []
    for cam in cams:
        w, t = cam.world_to_camera()
        rots.append(w)
        trans.append(t)
        focal.append(cam.focal)
        pp.append(cam.principal_point)
    return (
        torch.tensor(np.array(rots), dtype=dtype),
        torch.tensor(np.array(trans), dtype=dtype),
        torch.tensor(focal, dtype=dtype),
        torch.tensor(pp, dtype=dtype),
    )


def project_batch(
    positions: torch.Tensor,
    scale: torch.Tensor,
    rotation: torch.Tensor,
    color: torch.Tensor,
    cams: Sequence[Camera],
) -> Splats2D:
    """Project ``I`` Gaussian sets (leading dim) through ``I`` cameras.

    Args:
        positions, scale, color: I x N x 3.
        rotation: N x 3 x 3 or I x N x 3 x 3.
    """
    n_img, n_pts = positions.shape[:2]
    dtype = positions.dtype
    w, t, focal, pp = _camera_tensors(cams, dtype)
    pc = torch.einsum("iab,inb->ina", w, positions) + t[:, None, :]
    x, y, z = pc.unbind(-1)
    near = torch.tensor([c.near for c in cams], dtype=dtype)[:, None]
    keep = (z > near).detach()

    rot = rotation if rotation.dim() == 4 else rotation.expand(n_img, -1, -1, -1)
    m = torch.einsum("iab,inbc->inac", w, rot) * scale[:, :, None, :]  # W R diag(s)
    cov_cam = m @ m.transpose(-1, -2)
    zs = torch.where(keep, z, torch.ones_like(z))
    f = focal[:, None]
    zero = torch.zeros_like(zs)
    jac = torch.stack(
        [
            torch.stack([f / zs, zero, -f * x / zs**2], -1),
            torch.stack([zero, f / zs, -f * y / zs**2], -1),
        ],
        -2,
    )
    cov2d = jac @ cov_cam @ jac.transpose(-1, -2)
    cov2d = cov2d + DILATION * torch.eye(2, dtype=dtype)
    mean = torch.stack([f * x / zs, f * y / zs], -1) + pp[:, None, :]

    img_id, pt_id = torch.nonzero(keep, as_tuple=True)
    # order by image, then depth, then point index
    d = z.detach()[img_id, pt_id]
    order = np.lexsort((pt_id.numpy(), d.numpy(), img_id.numpy()))
    order = torch.from_numpy(order)
    img_id, pt_id = img_id[order], pt_id[order]
    return Splats2D(
        image=img_id,
        index=pt_id,
        mean=mean[img_id, pt_id],
        cov2d=cov2d[img_id, pt_id],
        color=color[img_id, pt_id],
        depth=z[img_id, pt_id],
    )


def project_gaussians(g: GaussianSet, cam: Camera) -> Splats2D:
    """Depth-sorted projected splats of one Gaussian set; points behind the near plane are culled."""
    s = project_batch(g.positions[None], g.scale[None], g.rotation, g.color[None], [cam])
    evals = torch.linalg.eigvalsh(s.cov2d.detach())
    if len(s) and evals.min() < DILATION * (1 - 1e-6):
        raise RuntimeError("projected covariance is not positive definite")
    return s


def composite(
    splats: Splats2D, n_img: int, width: int, height: int, background: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Front-to-back alpha compositing of sorted splats into ``n_img`` images."""
    dtype = splats.mean.dtype
    bg = torch.as_tensor(background, dtype=dtype).reshape(-1, 3)
    bg = bg.expand(n_img, 3) if bg.shape[0] == 1 else bg
    n_pix = n_img * height * width

    cov = splats.cov2d
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], -1)

    with torch.no_grad():
        mid = 0.5 * (a + c)
        lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
        rad = 3.0 * torch.sqrt(lam)
        mx, my = splats.mean[:, 0], splats.mean[:, 1]
        x0 = torch.clamp(torch.ceil(mx - rad), min=0).long()
        x1 = torch.clamp(torch.floor(mx + rad), max=width - 1).long()
        y0 = torch.clamp(torch.ceil(my - rad), min=0).long()
        y1 = torch.clamp(torch.floor(my + rad), max=height - 1).long()
        bw = torch.clamp(x1 - x0 + 1, min=0)
        bh = torch.clamp(y1 - y0 + 1, min=0)
        counts = bw * bh
        sid = torch.repeat_interleave(torch.arange(len(counts)), counts)
        start = torch.cumsum(counts, 0) - counts
        local = torch.arange(int(counts.sum())) - start[sid]
        px = x0[sid] + local % bw[sid]
        py = y0[sid] + local // bw[sid]
        pix = (splats.image[sid] * height + py) * width + px
        # pairs are generated splat-major in depth order; a stable sort by pixel keeps depth order
        order = torch.sort(pix, stable=True).indices
        sid, px, py, pix = sid[order], px[order], py[order], pix[order]
        uniq, seg_counts = torch.unique_consecutive(pix, return_counts=True)
        row = torch.repeat_interleave(torch.arange(len(uniq)), seg_counts)
        seg_start = torch.cumsum(seg_counts, 0) - seg_counts
        col = torch.arange(len(pix)) - seg_start[row]
        depth_slots = int(seg_counts.max()) if len(seg_counts) else 0

    dx = px.to(dtype) - splats.mean[sid, 0]
    dy = py.to(dtype) - splats.mean[sid, 1]
    cs = conic[sid]
    power = -0.5 * (cs[:, 0] * dx * dx + 2.0 * cs[:, 1] * dx * dy + cs[:, 2] * dy * dy)
    alpha = torch.clamp(GaussianSet.opacity * torch.exp(power), max=ALPHA_CAP)

    shape = (len(uniq), depth_slots + 1)
    dense = torch.zeros(shape, dtype=dtype).index_put((row, col), alpha)
    with torch.no_grad():
        trans = torch.cumprod(1.0 - dense, dim=1)
        alive = torch.cat([torch.ones(len(uniq), 1, dtype=dtype), trans[:, :-1]], 1) >= T_EPS
    dense = dense * alive
    trans = torch.cumprod(1.0 - dense, dim=1)
    t_before = torch.cat([torch.ones(len(uniq), 1, dtype=dtype), trans[:, :-1]], 1)
    weight = (dense * t_before)[row, col]
    t_final = trans[:, -1]

    contrib = torch.zeros(n_pix, 3, dtype=dtype).index_add(0, pix, weight[:, None] * splats.color[sid])
    t_full = torch.ones(n_pix, dtype=dtype).index_put((uniq,), t_final)
    img_of_pix = torch.arange(n_pix) // (height * width)
    rgb = contrib + t_full[:, None] * bg[img_of_pix]
    return rgb.reshape(n_img, height, width, 3), (1.0 - t_full).reshape(n_img, height, width)


def render_batch(
    positions: torch.Tensor,
    scale: torch.Tensor,
    rotation: torch.Tensor,
    color: torch.Tensor,
    cams: Sequence[Camera],
    background=(1.0, 1.0, 1.0),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Render I Gaussian sets through I cameras of equal resolution.

    Returns rgb (I x H x W x 3) and alpha (I x H x W).
    """
    width, height = cams[0].width, cams[0].height
    if any(c.width != width or c.height != height for c in cams):
        raise ValueError("all cameras in a batch must share the image size")
    splats = project_batch(positions, scale, rotation, color, cams)
    bg = torch.as_tensor(background, dtype=positions.dtype)
    return composite(splats, len(cams), width, height, bg)


def render(g: GaussianSet, cam: Camera, background=(1.0, 1.0, 1.0)) -> Image:
    rgb, alpha = render_batch(g.positions[None], g.scale[None], g.rotation, g.color[None], [cam], background)
    return Image(rgb[0], alpha[0])


def render_views(g: GaussianSet, cams: Sequence[Camera], background=(1.0, 1.0, 1.0)) -> list[Image]:
    n = len(cams)
    rgb, alpha = render_batch(
        g.positions[None].expand(n, -1, -1),
        g.scale[None].expand(n, -1, -1),
        g.rotation,
        g.color[None].expand(n, -1, -1),
        cams,
        background,
    )
    return [Image(rgb[i], alpha[i]) for i in range(n)]


def focal_sigma(scale: float, focal: float, depth: float) -> float:
    """Screen-space standard deviation of an isotropic splat on the optical axis."""
    return math.sqrt((scale * focal / depth) ** 2 + DILATION)
