"""Compact radiance-field backend: encoding, field network, ray sampling and quadrature.

Sample depths follow the quadrature convention: sample ``i`` represents the
interval ``[t_i, t_{i+1})`` with ``delta_i = t_{i+1} - t_i`` and the last
interval closing at the far bound. By default (``midpoint``) the intervals
instead split [near, far] halfway between neighbouring samples and the field is
evaluated at interval centers, which keeps the quadrature second-order accurate
when hierarchical sampling makes the spacing uneven. Rays composite over a black background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncodingConfig:
    num_freqs_position: int = 8
    num_freqs_direction: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.num_freqs_position < 0 or self.num_freqs_direction < 0:
            raise ValueError("frequency counts must be nonnegative")

    def position_dim(self) -> int:
        return 3 * (int(self.include_input) + 2 * self.num_freqs_position)

    def direction_dim(self) -> int:
        return 3 * (int(self.include_input) + 2 * self.num_freqs_direction)


def positional_encode(values: torch.Tensor, num_freqs: int, include_input: bool = True) -> torch.Tensor:
    """``[v] ++ [sin(2^j pi v), cos(2^j pi v)]_j`` along the last axis.

    Per frequency the output holds all sin terms for the k coordinates followed
    by all cos terms.
    """
    values = torch.as_tensor(values)
    parts = [values] if include_input else []
    for j in range(num_freqs):
        arg = (2.0 ** j) * math.pi * values
        parts += [torch.sin(arg), torch.cos(arg)]
    if not parts:
        return values[..., :0]
    return torch.cat(parts, dim=-1)


class RadianceField(nn.Module):
    """F_theta: (position, direction) -> (density, rgb).

    Density is read off before the view direction is injected; density uses a
    shifted softplus and color a sigmoid.
    """

    def __init__(self, encoding: EncodingConfig = EncodingConfig(), depth: int = 4, width: int = 128,
                 density_shift: float = -1.0):
        super().__init__()
        self.encoding = encoding
        self.density_shift = density_shift
        layers = []
        in_dim = encoding.position_dim()
        for _ in range(depth):
            layers.append(nn.Linear(in_dim, width))
            in_dim = width
        self.trunk = nn.ModuleList(layers)
        self.density_head = nn.Linear(width, 1)
        self.feature = nn.Linear(width, width)
        self.color_hidden = nn.Linear(width + encoding.direction_dim(), width // 2)
        self.color_head = nn.Linear(width // 2, 3)

    def forward(self, positions: torch.Tensor, directions: torch.Tensor):
        enc = self.encoding
        h = positional_encode(positions, enc.num_freqs_position, enc.include_input)
        for layer in self.trunk:
            h = F.relu(layer(h))
        sigma = F.softplus(self.density_head(h)[..., 0] + self.density_shift)
        d = positional_encode(directions, enc.num_freqs_direction, enc.include_input)
        g = torch.cat([self.feature(h), d], dim=-1)
        g = F.relu(self.color_hidden(g))
        rgb = torch.sigmoid(self.color_head(g))
        return sigma, rgb


FieldFn = Callable[[torch.Tensor, torch.Tensor], "tuple[torch.Tensor, torch.Tensor]"]


def field_query(params: FieldFn, positions: torch.Tensor, directions: torch.Tensor):
    """Evaluate a field on (..., 3) positions and matching directions."""
    return params(positions, directions)


@dataclass
class RaySamples:
    t_values: torch.Tensor  # (R, N) ascending evaluation depths
    deltas: torch.Tensor  # (R, N) positive interval lengths
    positions: torch.Tensor  # (R, N, 3)
    directions: torch.Tensor  # (R, N, 3)
    edges: torch.Tensor | None = None  # (R, N + 1) interval boundaries
    origins: torch.Tensor | None = None  # (R, 3)
    midpoint: bool = True


@dataclass
class RenderResult:
    color: torch.Tensor  # (R, 3)
    weights: torch.Tensor  # (R, N)
    accumulated_opacity: torch.Tensor  # (R,)
    samples: RaySamples | None = None


def sample_intervals(depths: torch.Tensor, t_near: float, t_far: float, midpoint: bool = True):
    """Quadrature intervals and evaluation depths for sorted sample ``depths``.

    ``midpoint``: the intervals split [t_near, t_far] halfway between
    neighbouring samples and the field is evaluated at each interval's center.
    Otherwise sample ``i`` spans ``[t_i, t_{i+1})`` (last closing at ``t_far``)
    and is evaluated at ``t_i``.
    """
    near = torch.full_like(depths[..., :1], t_near)
    far = torch.full_like(depths[..., :1], t_far)
    if midpoint:
        edges = torch.cat([near, 0.5 * (depths[..., 1:] + depths[..., :-1]), far], dim=-1)
        at = 0.5 * (edges[..., 1:] + edges[..., :-1])
    else:
        edges = torch.cat([depths, far], dim=-1)
        at = depths
    return edges, at


def _make_samples(origins, directions, depths, t_near, t_far, midpoint: bool = True) -> RaySamples:
    edges, t = sample_intervals(depths, t_near, t_far, midpoint)
    deltas = edges[..., 1:] - edges[..., :-1]
    pos = origins[..., None, :] + t[..., :, None] * directions[..., None, :]
    dirs = directions[..., None, :].expand_as(pos)
    return RaySamples(t, deltas, pos, dirs, edges, origins, midpoint)


def stratified_sample(origins: torch.Tensor, directions: torch.Tensor, t_near: float, t_far: float, n: int,
                      rng: np.random.Generator | None = None, midpoint: bool = True) -> RaySamples:
    """One uniform draw per equal-width bin of [t_near, t_far]; bin midpoints when ``rng`` is None."""
    if not t_near < t_far:
        raise ValueError(f"invalid bounds [{t_near}, {t_far}]")
    if n < 2:
        raise ValueError("need at least two samples per ray")
    origins = torch.as_tensor(origins)
    directions = torch.as_tensor(directions, dtype=origins.dtype)
    num_rays = origins.shape[0]
    width = (t_far - t_near) / n
    lower = t_near + width * torch.arange(n, dtype=origins.dtype)
    if rng is None:
        u = torch.full((num_rays, n), 0.5, dtype=origins.dtype)
    else:
        u = torch.from_numpy(rng.random((num_rays, n))).to(origins.dtype)
    t = lower + width * u
    return _make_samples(origins, directions, t, t_near, t_far, midpoint)


def composite_ray(samples: RaySamples, sigma: torch.Tensor, color: torch.Tensor) -> RenderResult:
    """Quadrature of the volume rendering integral over the sample intervals."""
    tau = sigma * samples.deltas
    alpha = 1.0 - torch.exp(-tau)
    zeros = torch.zeros_like(tau[..., :1])
    transmittance = torch.exp(-torch.cat([zeros, torch.cumsum(tau, dim=-1)[..., :-1]], dim=-1))
    weights = transmittance * alpha
    rgb = torch.sum(weights[..., None] * color, dim=-2)
    return RenderResult(rgb, weights, weights.sum(dim=-1), samples)


def sample_pdf(edges: torch.Tensor, weights: torch.Tensor, n: int, rng: np.random.Generator | None,
               floor: float = 1e-2) -> torch.Tensor:
    """Inverse-CDF draws from the piecewise-constant density ``weights`` on bins ``edges``.

    ``floor`` adds that fraction of the total mass spread uniformly by length.
    All-zero weights fall back to a uniform density.
    """
    weights = weights.detach().clamp_min(0)
    lengths = edges[..., 1:] - edges[..., :-1]
    total = weights.sum(dim=-1, keepdim=True)
    span = lengths.sum(dim=-1, keepdim=True)
    uniform = lengths / span
    pdf = weights + floor * total * uniform
    empty = (total <= 0).expand_as(pdf)
    pdf = torch.where(empty, uniform, pdf)
    pdf = pdf / pdf.sum(dim=-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, dim=-1)], dim=-1)
    cdf[..., -1] = 1.0
    num_rays = edges.shape[0]
    if rng is None:
        u = ((torch.arange(n, dtype=edges.dtype) + 0.5) / n).expand(num_rays, n).contiguous()
    else:
        u = torch.from_numpy(rng.random((num_rays, n))).to(edges.dtype)
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, pdf.shape[-1])
    c0 = torch.gather(cdf, -1, idx - 1)
    c1 = torch.gather(cdf, -1, idx)
    e0 = torch.gather(edges, -1, idx - 1)
    e1 = torch.gather(edges, -1, idx)
    frac = torch.where(c1 > c0, (u - c0) / (c1 - c0).clamp_min(1e-300), torch.zeros_like(u))
    return e0 + frac * (e1 - e0)


def hierarchical_resample(coarse: RaySamples, coarse_weights: torch.Tensor, n_fine: int,
                          rng: np.random.Generator | None, floor: float = 1e-2) -> RaySamples:
    """Coarse samples merged with importance draws over the coarse intervals."""
    t = coarse.t_values.detach()
    edges = coarse.edges.detach()
    fine = sample_pdf(edges, coarse_weights, n_fine, rng, floor)
    merged, _ = torch.sort(torch.cat([t, fine], dim=-1), dim=-1)
    return _make_samples(coarse.origins, coarse.directions[..., 0, :], merged, float(edges[0, 0]),
                         float(edges[0, -1]), coarse.midpoint)


@dataclass(frozen=True)
class RenderConfig:
    near: float = 2.0
    far: float = 6.0
    n_coarse: int = 64
    n_fine: int = 64
    pdf_floor: float = 1e-2
    chunk: int = 8192
    midpoint: bool = True


def render_batch(coarse_field: FieldFn, fine_field: FieldFn | None, origins: torch.Tensor, directions: torch.Tensor,
                 config: RenderConfig, rng: np.random.Generator | None = None):
    """Coarse and (optionally) fine renders for a batch of rays. Returns ``(coarse, fine)``."""
    if origins.shape[0] == 0:
        raise ValueError("empty ray batch")
    coarse_s = stratified_sample(origins, directions, config.near, config.far, config.n_coarse, rng,
                                 config.midpoint)
    sigma, rgb = field_query(coarse_field, coarse_s.positions, coarse_s.directions)
    coarse = composite_ray(coarse_s, sigma, rgb)
    if fine_field is None or config.n_fine == 0:
        return coarse, None
    fine_s = hierarchical_resample(coarse_s, coarse.weights, config.n_fine, rng, config.pdf_floor)
    sigma_f, rgb_f = field_query(fine_field, fine_s.positions, fine_s.directions)
    return coarse, composite_ray(fine_s, sigma_f, rgb_f)


class RenderBackend(Protocol):
    def render(self, params, rays, rng: np.random.Generator | None): ...


@dataclass
class NerfParams:
    coarse: RadianceField
    fine: RadianceField


class NerfBackend:
    """Radiance-field backend. ``rays`` is an ``(origins, directions)`` pair of (R, 3) arrays."""

    def __init__(self, config: RenderConfig = RenderConfig()):
        self.config = config

    def render(self, params: NerfParams, rays, rng: np.random.Generator | None = None):
        origins, directions = (torch.as_tensor(np.asarray(a)) if not torch.is_tensor(a) else a for a in rays)
        dtype = next(params.coarse.parameters()).dtype
        return render_batch(params.coarse, params.fine, origins.to(dtype), directions.to(dtype), self.config, rng)

    @torch.no_grad()
    def render_image(self, params: NerfParams, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Deterministic (midpoint / quantile) render of an (h, w, 3) ray grid."""
        h, w = origins.shape[:2]
        o = torch.as_tensor(origins.reshape(-1, 3))
        d = torch.as_tensor(directions.reshape(-1, 3))
        out = []
        step = self.config.chunk
        for k in range(0, o.shape[0], step):
            coarse, fine = self.render(params, (o[k:k + step], d[k:k + step]), None)
            out.append((fine or coarse).color)
        return torch.cat(out).reshape(h, w, 3).double().numpy()
