"""Dense grids and the probability machinery along the disparity axis.

Layout conventions used throughout the package:

* images, detection maps and disparity maps are ``(H, W)`` arrays indexed
  ``[v, u]`` (row, column);
* cost volumes are ``(H, W, D)`` arrays indexed ``[v, u, d]`` with the
  disparity axis fastest-varying;
* feature maps are ``(F, H, W)`` and feature volumes ``(2F, H, W, D)``.

A disparity index ``d`` maps to the signed disparity ``d - d0`` where ``d0``
is the disparity origin (0 unless configured otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

DEFAULT_DISPARITIES = 48
DEFAULT_FEATURES = 8


class ShapeError(ValueError):
    """Raised when array shapes do not agree with an operation's contract."""


class DegenerateError(ValueError):
    """Raised when the data cannot constrain the requested estimate."""


@dataclass
class DisparityMap:
    """Real-valued disparities with a validity mask (left-view frame)."""

    disp: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.disp = np.asarray(self.disp, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.disp.ndim != 2 or self.disp.shape != self.mask.shape:
            raise ShapeError(
                f"disparity {self.disp.shape} and mask {self.mask.shape} must be equal 2-D shapes"
            )
        if not np.all(np.isfinite(self.disp[self.mask])):
            raise ValueError("masked disparities must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.disp.shape

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def copy(self) -> "DisparityMap":
        return DisparityMap(self.disp.copy(), self.mask.copy())


@dataclass(frozen=True)
class TiltGeometry:
    """Acquisition geometry of a tilt pair.

    Attributes:
        phi: angle between the two views, degrees.
        theta: tilt-axis deviation from the image vertical, degrees.
        t: translational shift ``(t_x, t_y)`` in pixels.
    """

    phi: float = 8.0
    theta: float = 0.0
    t: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.phi < 90.0:
            raise ValueError(f"phi must lie in (0, 90) degrees, got {self.phi}")
        if abs(self.theta) > 10.0:
            raise ValueError(f"|theta| must be <= 10 degrees, got {self.theta}")


def check_image(img, name: str = "image") -> np.ndarray:
    """Validate a normalized 2-D intensity grid and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_volume(vc) -> np.ndarray:
    arr = np.asarray(vc, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) == 0:
        raise ShapeError(f"cost volume must be a non-empty (H, W, D) array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cost volume contains non-finite values")
    return arr


def softmax_neg(costs, axis: int = -1) -> np.ndarray:
    """Softmax of negated costs, ``p_i ∝ exp(-cost_i)``, along ``axis``.

    Stabilized by shifting with the maximum of ``-cost`` before exponentiation.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.size == 0:
        raise ValueError("softmax needs at least one entry")
    if not np.all(np.isfinite(c)):
        raise ValueError("softmax input contains non-finite values")
    z = -c
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def disparity_levels(n: int, d0: float = 0.0) -> np.ndarray:
    return np.arange(n, dtype=np.float64) - d0


def soft_argmin(vc, u: int, v: int, d0: float = 0.0) -> float:
    """Expected disparity at pixel ``(u, v)`` under ``softmax(-cost)``."""
    vc = check_volume(vc)
    h, w, n = vc.shape
    if not (0 <= u < w and 0 <= v < h):
        raise IndexError(f"pixel ({u}, {v}) outside a {w}x{h} volume")
    p = softmax_neg(vc[v, u])
    return float(np.dot(disparity_levels(n, d0), p))


def soft_argmin_map(vc, d0: float = 0.0) -> np.ndarray:
    """Vectorized :func:`soft_argmin` over every pixel; returns ``(H, W)``."""
    vc = check_volume(vc)
    p = softmax_neg(vc, axis=-1)
    return p @ disparity_levels(vc.shape[-1], d0)


def variance_map(vc, dgt: DisparityMap, d0: float = 0.0) -> np.ndarray:
    """Expected squared deviation of the disparity distribution from ground truth.

    Evaluated on masked pixels of ``dgt``; unmasked pixels are reported as 0.
    """
    vc = check_volume(vc)
    if vc.shape[:2] != dgt.shape:
        raise ShapeError(f"volume {vc.shape[:2]} and ground truth {dgt.shape} differ")
    if dgt.count == 0:
        raise ValueError("ground-truth mask is empty")
    p = softmax_neg(vc, axis=-1)
    levels = disparity_levels(vc.shape[-1], d0)
    g = np.where(dgt.mask, dgt.disp, 0.0)
    dev = (levels[None, None, :] - g[..., None]) ** 2
    out = (dev * p).sum(axis=-1)
    return np.where(dgt.mask, out, 0.0)


# --------------------------------------------------------------------------
# Differentiable counterparts (torch) with explicit adjoint rules.
# --------------------------------------------------------------------------


class SoftArgmin(torch.autograd.Function):
    """Soft-argmin over the last axis of a cost tensor.

    Adjoint: ``d(dhat)/d(c_k) = -p_k * (level_k - dhat)``.
    """

    @staticmethod
    def forward(ctx, cost, d0=0.0):
        levels = torch.arange(cost.shape[-1], dtype=cost.dtype, device=cost.device) - d0
        p = torch.softmax(-cost, dim=-1)
        dhat = (p * levels).sum(-1)
        ctx.save_for_backward(p, dhat, levels)
        return dhat

    @staticmethod
    def backward(ctx, grad_out):
        p, dhat, levels = ctx.saved_tensors
        grad = -p * (levels - dhat.unsqueeze(-1)) * grad_out.unsqueeze(-1)
        return grad, None


class ExpectedSquaredDeviation(torch.autograd.Function):
    """``sum_d (level_d - g)^2 softmax(-c)_d`` over the last axis.

    Adjoint w.r.t. costs: ``-p_k * ((level_k - g)^2 - vhat)``; w.r.t. ``g``:
    ``-2 * (dhat - g)``.
    """

    @staticmethod
    def forward(ctx, cost, target, d0=0.0):
        levels = torch.arange(cost.shape[-1], dtype=cost.dtype, device=cost.device) - d0
        p = torch.softmax(-cost, dim=-1)
        dev = (levels - target.unsqueeze(-1)) ** 2
        vhat = (p * dev).sum(-1)
        ctx.save_for_backward(p, dev, vhat, levels, target)
        return vhat

    @staticmethod
    def backward(ctx, grad_out):
        p, dev, vhat, levels, target = ctx.saved_tensors
        g = grad_out.unsqueeze(-1)
        grad_cost = -p * (dev - vhat.unsqueeze(-1)) * g
        grad_target = None
        if ctx.needs_input_grad[1]:
            dhat = (p * levels).sum(-1)
            grad_target = -2.0 * (dhat - target) * grad_out
        return grad_cost, grad_target, None


def soft_argmin_t(cost: torch.Tensor, d0: float = 0.0) -> torch.Tensor:
    return SoftArgmin.apply(cost, d0)


def variance_map_t(cost: torch.Tensor, target: torch.Tensor, d0: float = 0.0) -> torch.Tensor:
    return ExpectedSquaredDeviation.apply(cost, target, d0)


def grad_check(op: Callable[[torch.Tensor], torch.Tensor], x, eps: float = 1e-3) -> float:
    """Compare autograd gradients of a scalar map with central differences.

    Args:
        op: scalar-valued function of a float64 tensor.
        x: evaluation point (array-like).
        eps: finite-difference step.

    Returns:
        ``max_i |analytic_i - numeric_i| / max(1, |analytic_i|)``.
    """
    base = torch.as_tensor(np.asarray(x, dtype=np.float64)).clone()
    xt = base.clone().requires_grad_(True)
    out = op(xt)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued op")
    if not torch.isfinite(out):
        raise ValueError("op is non-finite at the evaluation point")
    # an output that does not depend on x has a zero gradient, which the
    # finite differences must then confirm
    (analytic,) = torch.autograd.grad(out, xt, allow_unused=True) if out.requires_grad else (None,)
    analytic = np.zeros(base.numel()) if analytic is None else analytic.detach().numpy().ravel()

    flat = base.view(-1)
    numeric = np.empty(flat.numel())
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = op(base).item()
            flat[i] = orig - eps
            fm = op(base).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError(f"op is non-finite near coordinate {i}")
            numeric[i] = (fp - fm) / (2.0 * eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
