"""Procedural dataset: painted mannequins, canonical renders and surrogate image features."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..diffusion import COLORS, Condition, encode_condition, random_attributes
from ..gaussians import GaussianSet
from ..geometry.camera import Camera, canonical_rig
from ..geometry.mannequin import ARM, FACE, FOOT, HAIR, HAND_PART, HEAD_CENTER, LEG, TORSO, BodyModel, build_body_model
from ..geometry.points import farthest_point_subsample, knn_indices
from ..heads import ConstraintRanges
from ..rasterizer import render_batch
from .config import RunConfig
from .io import load_container, save_container

# linear RGB references
COLOR_RGB = {
    "red": (0.80, 0.08, 0.08),
    "brown": (0.40, 0.22, 0.08),
    "black": (0.04, 0.04, 0.04),
    "pink": (0.95, 0.50, 0.65),
    "yellow": (0.90, 0.80, 0.10),
    "blue": (0.10, 0.20, 0.80),
    "purple": (0.45, 0.12, 0.60),
}
HAIR_RGB = {
    "blonde": (0.85, 0.68, 0.32),
    "black": (0.03, 0.03, 0.03),
    "brown": (0.30, 0.16, 0.07),
    "ginger": (0.75, 0.32, 0.08),
}
SKIN_RGB = {
    "white": (0.82, 0.60, 0.48),
    "black": (0.26, 0.15, 0.09),
    "asian": (0.78, 0.60, 0.40),
}
GENDER_BETA = {
    "man": np.array([0.5, 0.5, 0.2, 0.3, 0.3, 0.0, 0.0, -0.5, 0.0, 0.3]),
    "woman": np.array([-0.5, -0.5, -0.2, -0.3, -0.3, 0.0, 0.0, 0.7, 0.0, -0.3]),
}
NORMAL_SCALE = 0.002


def nearest_color(rgb) -> str:
    rgb = np.asarray(rgb, dtype=np.float64)
    names = list(COLORS)
    refs = np.array([COLOR_RGB[n] for n in names])
    return names[int(np.argmin(((refs - rgb) ** 2).sum(1)))]


def ranges_from_config(cfg: RunConfig) -> ConstraintRanges:
    return ConstraintRanges(cfg.disp_body, cfg.disp_head, cfg.disp_hand, cfg.scale_body, cfg.scale_head, cfg.scale_hand, cfg.s_min)


def cameras(cfg: RunConfig, size: int | None = None) -> list[Camera]:
    size = size or cfg.image_size
    return canonical_rig(size, size, cfg.camera_radius, cfg.camera_elevation, vertical_fov=cfg.fov)


def paint_colors(body: BodyModel, attributes: dict, rng: np.random.Generator, noise: float) -> np.ndarray:
    """Per-anchor linear RGB colours for an attribute set."""
    parts = body.parts
    skin = np.array(SKIN_RGB[attributes["race"]])
    top = np.array(COLOR_RGB[attributes["top_color"]])
    colors = np.tile(skin, (body.n_points, 1))
    colors[parts == TORSO] = top
    if attributes["top"].startswith("long-sleeve"):
        colors[parts == ARM] = top
    if attributes["top"].endswith("shirt") and "t-shirt" not in attributes["top"]:
        p = body.anchors
        placket = (parts == TORSO) & (np.abs(p[:, 0]) < 0.025) & (p[:, 1] < 0)
        colors[placket] = 0.6 * top
    colors[parts == LEG] = COLOR_RGB[attributes["trouser_color"]]
    colors[parts == FOOT] = COLOR_RGB[attributes["trainer_color"]]
    hair = parts == HAIR
    if attributes["gender"] == "woman":
        rel = body.anchors - HEAD_CENTER
        hair = hair | ((parts == FACE) & (rel[:, 1] > 0.0)) | ((rel[:, 1] > 0.02) & (rel[:, 2] > -0.2) & (rel[:, 2] < 0) & (np.abs(rel[:, 0]) < 0.09))
    colors[hair] = HAIR_RGB[attributes["hair"]]
    colors[parts == HAND_PART] = skin
    colors = colors + rng.uniform(-noise, noise, size=colors.shape)
    return np.clip(colors, 0.0, 1.0)


def surface_scales(body: BodyModel, ranges: ConstraintRanges) -> np.ndarray:
    """Tangent scales from local point spacing, thin along the normal, inside the bounds."""
    anchors = body.anchors
    nn = knn_indices(anchors, None, 1, include_self=False).indices[:, 0]
    spacing = np.linalg.norm(anchors - anchors[nn], axis=1)
    bound = np.array([ranges.scale_bound(int(r)) for r in body.regions])
    tangent = np.clip(0.6 * spacing, 2 * ranges.s_min, 0.95 * bound)
    normal = np.minimum(NORMAL_SCALE, 0.95 * bound)
    return np.stack([tangent, tangent, normal], axis=1)


@dataclass
class SyntheticSample:
    seed: int
    condition: Condition
    images: np.ndarray  # 4 x H x W x 3 (front, left, back, right)
    feature_grid: np.ndarray  # H' x W' x C
    gt_params: np.ndarray  # N x 9
    beta: np.ndarray  # B

    @property
    def attributes(self) -> dict:
        return dict(self.condition.attributes)


def gaussians_for(body: BodyModel, params, beta=None) -> GaussianSet:
    params = torch.as_tensor(params, dtype=torch.float32)
    anchors = body.anchors if beta is None else body.posed(beta)
    return GaussianSet.from_params(params, anchors, body.rotations, body.regions)


def render_params(body: BodyModel, params, cams: list[Camera], beta=None, background: float = 1.0) -> np.ndarray:
    g = gaussians_for(body, params, beta)
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
    return rgb.numpy()


class FeatureExtractor:
    """Fixed random-feature surrogate for a learned image backbone.

    The input image is box-downsampled to the feature grid; each cell carries
    RGB, coverage, two coordinate ramps and fixed random sinusoidal projections
    of those six values.
    """

    def __init__(self, size: int, channels: int, seed: int):
        if channels < 6:
            raise ValueError("need at least 6 feature channels")
        self.size = size
        self.channels = channels
        rng = np.random.default_rng(seed)
        self.proj = rng.normal(0.0, 2.0, size=(6, channels - 6))
        self.phase = rng.uniform(0, 2 * np.pi, size=channels - 6)

    def __call__(self, rgb: np.ndarray, background: float = 1.0) -> np.ndarray:
        h, w, _ = rgb.shape
        s = self.size
        if h % s or w % s:
            raise ValueError(f"image size {h}x{w} is not a multiple of the feature grid {s}")
        cells = rgb.reshape(s, h // s, s, w // s, 3).mean(axis=(1, 3))
        coverage = (np.abs(rgb - background).max(-1) > 1e-3).astype(np.float64)
        coverage = coverage.reshape(s, h // s, s, w // s).mean(axis=(1, 3))
        ramp = (np.arange(s) + 0.5) / s * 2 - 1
        v, u = np.meshgrid(ramp, ramp, indexing="ij")
        base = np.concatenate([cells, coverage[..., None], u[..., None], v[..., None]], axis=-1)
        extra = np.sin(base @ self.proj + self.phase)
        return np.concatenate([base, extra], axis=-1).astype(np.float32)


def sample_beta(attributes: dict, rng: np.random.Generator, n_shape: int) -> np.ndarray:
    beta = np.zeros(n_shape)
    base = GENDER_BETA[attributes["gender"]]
    m = min(n_shape, len(base))
    beta[:m] = base[:m]
    return beta + 0.3 * rng.normal(size=n_shape)


def generate_synthetic_sample(seed: int, attributes: dict | None, body: BodyModel, cfg: RunConfig) -> SyntheticSample:
    """Paint, pose and render one sample deterministically from ``seed``.

    ``attributes=None`` draws every attribute uniformly from the vocabulary.
    """
    rng = np.random.default_rng([cfg.seed, seed])
    if attributes is None:
        attributes = random_attributes(rng)
    cond = encode_condition(attributes)
    ranges = ranges_from_config(cfg)
    colors = paint_colors(body, attributes, rng, cfg.color_noise)
    scales = surface_scales(body, ranges)
    params = np.concatenate([np.zeros((body.n_points, 3)), scales, colors], axis=1).astype(np.float32)
    beta = sample_beta(attributes, rng, body.n_shape)
    images = render_params(body, params, cameras(cfg), beta, cfg.background)
    extractor = FeatureExtractor(cfg.feature_size, cfg.feature_channels, cfg.feature_seed)
    grid = extractor(images[0], cfg.background)
    return SyntheticSample(seed, cond, images.astype(np.float32), grid, params, beta.astype(np.float32))


def body_for(cfg: RunConfig, n_points: int | None = None) -> BodyModel:
    return build_body_model(n_points or cfg.n_points, seed=cfg.body_seed)


def subset_body(body: BodyModel, n: int, seed: int) -> tuple[BodyModel, np.ndarray]:
    """Farthest-point subset of the anchors as a smaller body; also returns the row indices."""
    if n > body.n_points:
        raise ValueError(f"cannot take {n} anchors from a body with {body.n_points}")
    if n == body.n_points:
        return body, np.arange(n)
    _, idx = farthest_point_subsample(body.anchors, n, seed)
    idx = np.sort(idx)
    return BodyModel(body.mesh, body.anchor_index[idx], body.shape_basis), idx


def generate_dataset(cfg: RunConfig, body: BodyModel | None = None, size: int | None = None, progress=None) -> list[SyntheticSample]:
    body = body or body_for(cfg)
    out = []
    for i in range(size if size is not None else cfg.dataset_size):
        out.append(generate_synthetic_sample(i, None, body, cfg))
        if progress:
            progress(i)
    return out


def save_dataset(path: str | Path, samples: list[SyntheticSample], cfg: RunConfig) -> None:
    meta = {
        "n_points": int(samples[0].gt_params.shape[0]) if samples else cfg.n_points,
        "attributes": [s.attributes for s in samples],
        "seed": cfg.seed,
    }
    arrays = {
        "seeds": np.array([s.seed for s in samples], dtype=np.int64),
        "images": np.stack([s.images for s in samples]),
        "grids": np.stack([s.feature_grid for s in samples]),
        "params": np.stack([s.gt_params for s in samples]),
        "betas": np.stack([s.beta for s in samples]),
    }
    save_container(path, "dataset", meta, arrays)


def load_dataset(path: str | Path) -> list[SyntheticSample]:
    meta, arr = load_container(path, "dataset")
    return [
        SyntheticSample(int(arr["seeds"][i]), encode_condition(meta["attributes"][i]), arr["images"][i], arr["grids"][i], arr["params"][i], arr["betas"][i])
        for i in range(len(arr["seeds"]))
    ]
