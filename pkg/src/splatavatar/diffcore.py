"""Finite-difference verification of autograd gradients.

All differentiable ops in this package are written against ``torch`` and rely
on its reverse-mode autograd. ``grad_check`` is the independent oracle used by
the test-suite to confirm that the analytic gradients are right.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Callable

import torch


class EvaluationError(RuntimeError):
    """Raised when the checked function produces a non-finite value."""


@dataclass(frozen=True)
class GradReport:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float

    def ok(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error <= tol


def _scalar(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> float:
    value = f(x)
    if isinstance(value, torch.Tensor):
        value = value.item()
    return float(value)


def _central_diff(g: Callable[[torch.Tensor], float], base: torch.Tensor, eps: float) -> torch.Tensor:
    flat = base.reshape(-1)
    numeric = torch.empty_like(flat)
    for i in range(flat.numel()):
        xp = flat.clone()
        xp[i] += eps
        xm = flat.clone()
        xm[i] -= eps
        fp = g(xp.reshape(base.shape))
        fm = g(xm.reshape(base.shape))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError(f"f is not finite when perturbing coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * eps)
    return numeric


def _report(analytic: torch.Tensor, numeric: torch.Tensor) -> GradReport:
    if analytic.numel() == 0:
        return GradReport(0.0, 0, 0.0, 0.0)
    denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=1e-8)
    rel = (analytic - numeric).abs() / denom
    worst = int(torch.argmax(rel))
    return GradReport(float(rel[worst]), worst, float(analytic[worst]), float(numeric[worst]))


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-4,
) -> GradReport:
    """Compare the autograd gradient of ``f`` at ``x`` against central differences.

    ``x`` is promoted to float64 so that truncation error, not round-off, bounds
    the numeric estimate; ``f`` must therefore be dtype-generic.

    Args:
        f: scalar-valued function of a single tensor.
        x: point of evaluation (any shape).
        eps: finite-difference step.

    Returns:
        GradReport with the worst relative error over all coordinates, using
        ``max(|analytic|, |numeric|, 1e-8)`` as the denominator.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x64 = x.detach().to(torch.float64).clone().requires_grad_(True)
    out = f(x64)
    if not torch.isfinite(out).all():
        raise EvaluationError("f is not finite at the evaluation point")
    (analytic,) = torch.autograd.grad(out, x64, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x64)

    with torch.no_grad():
        numeric = _central_diff(lambda v: _scalar(f, v), x64.detach(), eps)
    return _report(analytic.detach().reshape(-1), numeric)


def grad_check_params(
    loss_fn: Callable[[], torch.Tensor],
    module: torch.nn.Module,
    names: list[str] | None = None,
    eps: float = 1e-5,
) -> dict[str, GradReport]:
    """Run the central-difference check on each named parameter of ``module``.

    The module is converted to float64 in place, so pass a throwaway copy.
    ``loss_fn`` takes no arguments and reads the module's current parameters.
    """
    module.double()
    params = dict(module.named_parameters())
    names = list(params) if names is None else names
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise EvaluationError("loss is not finite at the evaluation point")
    loss.backward()

    reports = {}
    for name in names:
        p = params[name]
        analytic = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        original = p.detach().clone()

        def g(value, p=p):
            with torch.no_grad():
                p.copy_(value)
                return float(loss_fn())

        with torch.no_grad():
            numeric = _central_diff(g, original, eps)
            p.copy_(original)
        reports[name] = _report(analytic.reshape(-1), numeric)
    return reports
