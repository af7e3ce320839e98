"""Pinhole cameras and the four-view canonical rig."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VIEW_NAMES = ("front", "left", "back", "right")


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float]
    vertical_fov: float  # radians
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.vertical_fov < math.pi:
            raise ValueError("vertical_fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        fwd = np.subtract(self.look_at, self.position)
        if np.linalg.norm(fwd) == 0:
            raise ValueError("camera position equals look_at")
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-9 * np.linalg.norm(fwd) * np.linalg.norm(self.up):
            raise ValueError("up vector is parallel to the view direction")

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels)."""
        return 0.5 * self.height / math.tan(0.5 * self.vertical_fov)

    @property
    def principal_point(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """Rotation ``W`` (rows: right, down, forward) and translation ``t``.

        Camera coordinates are ``W @ x + t``: +x right, +y down, +z along the view.
        """
        fwd = np.subtract(self.look_at, self.position).astype(np.float64)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return rot, -rot @ np.asarray(self.position, dtype=np.float64)

    def resized(self, width: int, height: int) -> "Camera":
        return Camera(self.position, self.look_at, self.up, self.vertical_fov, width, height, self.near)


def canonical_rig(
    width: int,
    height: int,
    radius: float = 3.0,
    elevation: float = 0.0,
    target: tuple[float, float, float] = (0.0, 0.0, -0.05),
    vertical_fov: float = math.radians(40.0),
) -> list[Camera]:
    """Cameras at azimuths 0, 90, 180 and 270 degrees around a z-up body facing -y.

    Returned in ``VIEW_NAMES`` order: front, left, back, right.
    """
    cams = []
    for az in (0.0, 90.0, 180.0, 270.0):
        a = math.radians(az)
        e = math.radians(elevation)
        pos = (
            target[0] + radius * math.cos(e) * math.sin(a),
            target[1] - radius * math.cos(e) * math.cos(a),
            target[2] + radius * math.sin(e),
        )
        cams.append(Camera(pos, target, (0.0, 0.0, 1.0), vertical_fov, width, height))
    return cams
