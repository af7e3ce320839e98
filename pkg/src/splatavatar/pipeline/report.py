"""Tab-separated metric reports and matplotlib figures written next to them."""

from __future__ import annotations

import io
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write_bytes, linear_to_srgb  # noqa: E402

VIEW_LABELS = ("front", "left", "back", "right")


def format_value(value) -> str:
    """Numbers as fixed text; infinities as ``inf``/``-inf`` and NaN as ``nan``."""
    if isinstance(value, str):
        return value
    v = float(value)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return f"{v:.6f}"


def tsv_text(rows: list[tuple], header: tuple[str, ...] = ("section", "key", "metric", "value")) -> str:
    lines = ["\t".join(header)]
    for row in rows:
        *keys, value = row
        lines.append("\t".join([*map(str, keys), format_value(value)]))
    return "\n".join(lines) + "\n"


def write_tsv(path: str | Path, rows: list[tuple]) -> None:
    atomic_write_bytes(path, tsv_text(rows).encode("utf-8"))


def _save(fig, path: str | Path) -> None:
    buf = io.BytesIO()
    # no software/date metadata so reruns are byte-identical
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def _finite(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    cap = 100.0
    return np.where(np.isfinite(arr), arr, cap)


def psnr_figure(path: str | Path, table: np.ndarray, title: str = "PSNR per view") -> None:
    """Grouped bars of a (samples x views) PSNR table; infinite values drawn at 100 dB."""
    table = _finite(table)
    n, v = table.shape
    fig, ax = plt.subplots(figsize=(6, 3.2))
    width = 0.8 / max(n, 1)
    x = np.arange(v)
    for i in range(n):
        ax.bar(x + (i - (n - 1) / 2) * width, table[i], width, label=f"sample {i}")
    ax.set_xticks(x, VIEW_LABELS[:v] if v <= 4 else [str(i) for i in range(v)])
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    if n <= 8:
        ax.legend(fontsize=7, ncol=min(n, 4))
    fig.tight_layout()
    _save(fig, path)


def comparison_figure(path: str | Path, pred: np.ndarray, target: np.ndarray) -> None:
    """Rows of prediction over target for up to four views (linear RGB in)."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    v = pred.shape[0]
    fig, axes = plt.subplots(2, v, figsize=(2 * v, 4.2), squeeze=False)
    for j in range(v):
        for r, (img, name) in enumerate(((pred[j], "predicted"), (target[j], "target"))):
            ax = axes[r, j]
            ax.imshow(linear_to_srgb(img), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(VIEW_LABELS[j] if v <= 4 else str(j), fontsize=9)
            if j == 0:
                ax.set_ylabel(name, fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def alignment_figure(path: str | Path, rates: dict[str, float]) -> None:
    fig, ax = plt.subplots(figsize=(4, 3))
    names = list(rates)
    ax.bar(names, [100 * rates[k] for k in names], color="tab:blue")
    ax.axhline(100 / 7, color="grey", linestyle="--", linewidth=1, label="chance")
    ax.set_ylim(0, 100)
    ax.set_ylabel("top colour matches prompt (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def loss_figure(path: str | Path, losses, title: str = "training loss") -> None:
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3))
    if len(losses):
        ax.plot(np.arange(len(losses)), losses, linewidth=0.8)
        if np.all(losses > 0):
            ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
