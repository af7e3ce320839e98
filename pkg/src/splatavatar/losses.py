"""Photometric losses and metrics on linear RGB images."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .rasterizer import Image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _rgb(img) -> torch.Tensor:
    return img.rgb if isinstance(img, Image) else img


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(pred, target) -> torch.Tensor:
    """Mean SSIM over pixels and channels for ``... x H x W x 3`` tensors."""
    x, y = _rgb(pred), _rgb(target)
    if x.shape != y.shape:
        raise ValueError(f"image size mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    x = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)
    y = y.reshape(-1, *y.shape[-3:]).permute(0, 3, 1, 2)
    ch = x.shape[1]
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA, x.dtype).expand(ch, 1, SSIM_WINDOW, SSIM_WINDOW)
    pad = SSIM_WINDOW // 2

    def blur(t):
        return F.conv2d(t, win, padding=pad, groups=ch)

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x**2
    syy = blur(y * y) - mu_y**2
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def render_loss(pred, target, w_l1: float = 1.0, w_ssim: float = 0.25) -> torch.Tensor:
    """``w_l1 * mean|pred - target| + w_ssim * (1 - SSIM)``."""
    x, y = _rgb(pred), _rgb(target)
    if x.shape != y.shape:
        raise ValueError(f"image size mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    loss = w_l1 * (x - y).abs().mean()
    if w_ssim:
        loss = loss + w_ssim * (1.0 - ssim(x, y))
    return loss


def psnr(pred, target) -> float:
    """PSNR in dB for images in [0, 1]; ``inf`` when the images are identical."""
    x, y = _rgb(pred), _rgb(target)
    if x.shape != y.shape:
        raise ValueError(f"image size mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float(((x.detach().double() - y.detach().double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
