"""Text-conditioned Gaussian-splat avatars: attention uplift, bounded regression heads,
a differentiable CPU rasterizer and a point-cloud diffusion model."""

__version__ = "0.1.0"
