"""Versioned checkpoints for reconstruction models, denoisers and parameter files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from ..diffusion import DenoiserNet, ParamStats, vocabulary_hash
from ..geometry.mannequin import BodyModel
from .config import RunConfig, dump_config, parse_config
from .io import FormatError, load_container, save_container
from .model import ReconstructionNet
from .training import DiffusionModel, denoiser_config, diffusion_graphs


def _state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"w/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k[2:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("w/")}
    module.load_state_dict(state, strict=True)


def _check_vocab(meta: dict, path) -> None:
    if meta.get("vocab_hash") != vocabulary_hash():
        raise FormatError(f"{path}: checkpoint was trained with a different attribute vocabulary")


def save_reconstruction(path: str | Path, net: ReconstructionNet, history: list[float] | None = None) -> None:
    meta = {"mode": net.mode, "config": dump_config(net.cfg), "vocab_hash": vocabulary_hash()}
    arrays = _state_arrays(net)
    if history is not None:
        arrays["history"] = np.asarray(history, dtype=np.float64)
    save_container(path, "reconstruction", meta, arrays)


def load_reconstruction(path: str | Path, body: BodyModel | None = None) -> ReconstructionNet:
    from .data import body_for

    meta, arrays = load_container(path, "reconstruction")
    _check_vocab(meta, path)
    cfg = parse_config(meta["config"])
    body = body or body_for(cfg)
    if body.n_points != cfg.n_points:
        raise FormatError(f"{path}: checkpoint expects {cfg.n_points} points, body has {body.n_points}")
    net = ReconstructionNet(cfg, body, meta["mode"])
    _load_state(net, arrays)
    net.eval()
    return net


def save_diffusion(path: str | Path, model: DiffusionModel, cfg: RunConfig) -> None:
    meta = {"config": dump_config(cfg), "vocab_hash": vocabulary_hash()}
    arrays = _state_arrays(model.net)
    arrays.update(
        x_min=np.asarray(model.stats.x_min, dtype=np.float64),
        x_max=np.asarray(model.stats.x_max, dtype=np.float64),
        points=np.asarray(model.points, dtype=np.float64),
        history=np.asarray(model.history, dtype=np.float64),
    )
    save_container(path, "diffusion", meta, arrays)


def load_diffusion(path: str | Path) -> tuple[DiffusionModel, RunConfig]:
    meta, arrays = load_container(path, "diffusion")
    _check_vocab(meta, path)
    cfg = parse_config(meta["config"])
    net = DenoiserNet(denoiser_config(cfg))
    _load_state(net, arrays)
    net.eval()
    points = arrays["points"]
    model = DiffusionModel(net, ParamStats(arrays["x_min"], arrays["x_max"]), diffusion_graphs(points, cfg), points, list(arrays["history"]))
    return model, cfg


def save_params(path: str | Path, params: np.ndarray, meta: dict, **arrays) -> None:
    """Gaussian parameter file: N x 9 (or S x N x 9) plus optional extra arrays
    such as ``anchors``, ``rotation`` and ``region``."""
    out = {"params": np.asarray(params, dtype=np.float32)}
    out.update({k: np.asarray(v) for k, v in arrays.items()})
    save_container(path, "params", dict(meta), out)


def load_params(path: str | Path) -> tuple[np.ndarray, dict, dict]:
    """Returns (params, extra arrays, meta)."""
    meta, arrays = load_container(path, "params")
    params = arrays.pop("params")
    return params, arrays, meta
