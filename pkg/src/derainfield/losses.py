"""Unsupervised decomposition losses for a rainy patch ``I`` split into ``B + R``.

All patches are (H, W, 3) tensors; every norm is reduced by the mean over
pixels and channels so the weights do not depend on patch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .dirgrad import DominantDirections, axis_gradients, directional_gradient

DEFAULT_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    likelihood: float = 0.1
    reconstruction: float = 500.0
    tv: float = 0.5
    gradient_rotation: float = 1.0

    def __post_init__(self):
        if min(self.likelihood, self.reconstruction, self.tv, self.gradient_rotation) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    ll: torch.Tensor
    rec: torch.Tensor
    tv: torch.Tensor
    agr: torch.Tensor
    total: torch.Tensor
    dominant_angles_used: DominantDirections | None

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("ll", "rec", "tv", "agr", "total")}


def _check_shapes(*tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def loss_rec(I: torch.Tensor, B: torch.Tensor, R: torch.Tensor) -> torch.Tensor:
    _check_shapes(I, B, R)
    return torch.mean((I - B - R) ** 2)


def residual_std(I: torch.Tensor, B: torch.Tensor, R: torch.Tensor) -> torch.Tensor:
    """Population standard deviation of ``I - B - R``, detached from the graph."""
    return torch.std((I - B - R).detach(), unbiased=False)


def loss_likelihood(I: torch.Tensor, B: torch.Tensor, R: torch.Tensor, eps: float = DEFAULT_EPS,
                    sigma: torch.Tensor | float | None = None) -> torch.Tensor:
    """Residual energy normalized by the (constant) residual variance."""
    _check_shapes(I, B, R)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if sigma is None:
        sigma = residual_std(I, B, R)
    return torch.mean((I - B - R) ** 2) / (sigma ** 2 + eps)


def loss_tv(B: torch.Tensor) -> torch.Tensor:
    if B.shape[0] < 2 or B.shape[1] < 2:
        raise ValueError("TV needs at least a 2x2 patch")
    dx, dy = axis_gradients(B)
    return dx.abs().mean() + dy.abs().mean()


def loss_agr(I: torch.Tensor, B: torch.Tensor, R: torch.Tensor, angles: DominantDirections) -> torch.Tensor:
    """Gradient-rotation loss over the dominant gradient orientations ``angles``.

    ``theta`` is a gradient orientation, i.e. perpendicular to the streaks:
    strong ``theta``-gradients are rewarded in R and penalized in B and I - R,
    while R is kept smooth along the streaks (``theta + pi/2``).
    """
    _check_shapes(I, B, R)
    if angles is None or angles.k == 0:
        raise ValueError("gradient-rotation loss needs at least one angle")
    residual = I - R
    terms = []
    for theta in angles.angles_rad:
        theta = float(theta)
        terms.append(
            directional_gradient(R, theta + math.pi / 2).abs().mean()
            - directional_gradient(R, theta).abs().mean()
            + directional_gradient(B, theta).abs().mean()
            + directional_gradient(residual, theta).abs().mean()
        )
    return torch.stack(terms).mean()


def total_loss(I: torch.Tensor, B: torch.Tensor, R: torch.Tensor, weights: LossWeights = LossWeights(),
               angles: DominantDirections | None = None, eps: float = DEFAULT_EPS,
               sigma: torch.Tensor | float | None = None) -> LossBreakdown:
    """Weighted sum of the four terms; without angles the rotation term is reported as 0 and skipped."""
    ll = loss_likelihood(I, B, R, eps, sigma)
    rec = loss_rec(I, B, R)
    tv = loss_tv(B)
    if angles is not None and angles.k > 0:
        agr = loss_agr(I, B, R, angles)
    else:
        agr = torch.zeros((), dtype=B.dtype)
        angles = None
    total = (weights.likelihood * ll + weights.reconstruction * rec + weights.tv * tv
             + weights.gradient_rotation * agr)
    return LossBreakdown(ll, rec, tv, agr, total, angles)
