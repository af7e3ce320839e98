"""Surface-anchored Gaussian sets with fixed opacity and normal-aligned rotations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

N_PARAMS = 9  # displacement(3), scale(3), color(3)
PARAM_SLICES = {"displacement": slice(0, 3), "scale": slice(3, 6), "color": slice(6, 9)}


@dataclass
class GaussianSet:
    """Per-point Gaussian parameters around fixed anchors.

    Opacity is 1 for every point and is not stored; rotations are derived from
    surface normals and never optimised.
    """

    anchors: torch.Tensor  # N x 3
    displacement: torch.Tensor  # N x 3
    scale: torch.Tensor  # N x 3
    color: torch.Tensor  # N x 3
    rotation: torch.Tensor  # N x 3 x 3
    region: torch.Tensor | None = None  # N

    opacity = 1.0

    def __len__(self) -> int:
        return self.anchors.shape[0]

    @property
    def positions(self) -> torch.Tensor:
        return self.anchors + self.displacement

    def params(self) -> torch.Tensor:
        """Flatten to the N x 9 layout used by the diffusion model."""
        return torch.cat([self.displacement, self.scale, self.color], dim=-1)

    @classmethod
    def from_params(cls, params, anchors, rotation, region=None) -> "GaussianSet":
        params = torch.as_tensor(params)
        anchors = torch.as_tensor(anchors, dtype=params.dtype)
        rotation = torch.as_tensor(rotation, dtype=params.dtype)
        if region is not None:
            region = torch.as_tensor(np.asarray(region), dtype=torch.long)
        return cls(
            anchors,
            params[..., PARAM_SLICES["displacement"]],
            params[..., PARAM_SLICES["scale"]],
            params[..., PARAM_SLICES["color"]],
            rotation,
            region,
        )

    def detach(self) -> "GaussianSet":
        return GaussianSet(
            self.anchors.detach(),
            self.displacement.detach(),
            self.scale.detach(),
            self.color.detach(),
            self.rotation.detach(),
            self.region,
        )

    def to(self, dtype: torch.dtype) -> "GaussianSet":
        return GaussianSet(
            self.anchors.to(dtype),
            self.displacement.to(dtype),
            self.scale.to(dtype),
            self.color.to(dtype),
            self.rotation.to(dtype),
            self.region,
        )
