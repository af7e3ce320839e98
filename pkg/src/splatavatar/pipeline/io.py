"""Versioned binary containers, PNG images and atomic file writes."""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MAGIC = b"SPLT"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_container(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``MAGIC | version | kind | json meta | npz arrays``."""
    buf = io.BytesIO()
    np.savez_compressed(buf, **{k: np.ascontiguousarray(v) for k, v in arrays.items()})
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    kind_bytes = kind.encode("ascii")
    header = MAGIC + bytes([FORMAT_VERSION, len(kind_bytes)]) + kind_bytes + struct.pack("<I", len(meta_bytes))
    atomic_write_bytes(path, header + meta_bytes + buf.getvalue())


def load_container(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a container file")
    version = data[4]
    if version > FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    klen = data[5]
    found = data[6 : 6 + klen].decode("ascii")
    if kind is not None and found != kind:
        raise FormatError(f"{path}: expected a {kind!r} file, found {found!r}")
    pos = 6 + klen
    (mlen,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    meta = json.loads(data[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    with np.load(io.BytesIO(data[pos:]), allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta["_kind"] = found
    return meta, arrays


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def png_bytes(rgb: np.ndarray) -> bytes:
    """Encode a linear H x W x 3 image as 8-bit sRGB PNG."""
    u8 = np.round(linear_to_srgb(np.asarray(rgb, dtype=np.float64)) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: str | Path, rgb: np.ndarray) -> None:
    atomic_write_bytes(path, png_bytes(rgb))


def read_png(path: str | Path) -> np.ndarray:
    """Load a PNG as linear RGB in [0, 1]."""
    with PILImage.open(path) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.float64)
    return srgb_to_linear(u8 / 255.0)


class OutputTracker:
    """Remembers files written during a command so they can be removed on failure."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path: str | Path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for p in reversed(self.paths):
            if p.is_file():
                p.unlink()


@contextmanager
def tracked_outputs():
    tracker = OutputTracker()
    try:
        yield tracker
    except BaseException:
        tracker.cleanup()
        raise
