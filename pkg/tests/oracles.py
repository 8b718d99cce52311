"""Independent reference computations shared by the unit and acceptance tests."""

import math

import numpy as np
import torch
from scipy import integrate


def relative_error(analytic, numeric) -> float:
    """max |a - f| scaled by the largest magnitude of either (so tiny entries do not blow up)."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(f).max(initial=0.0), 1e-12)
    return float(np.abs(a - f).max(initial=0.0) / scale)


def _scalar(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def central_difference(fn, x: torch.Tensor, step: float) -> torch.Tensor:
    """Elementwise central differences of scalar ``fn`` at ``x`` (double tensor, not modified)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for k in range(flat.numel()):
        old = flat[k].item()
        flat[k] = old + step
        plus = _scalar(fn(x))
        flat[k] = old - step
        minus = _scalar(fn(x))
        flat[k] = old
        gflat[k] = (plus - minus) / (2 * step)
    return grad


def directional_difference(fn, params, directions, step: float) -> float:
    """Central difference of scalar ``fn()`` along ``directions`` applied to the tensors ``params``."""
    with torch.no_grad():
        for p, d in zip(params, directions):
            p.add_(step * d)
        plus = _scalar(fn())
        for p, d in zip(params, directions):
            p.sub_(2 * step * d)
        minus = _scalar(fn())
        for p, d in zip(params, directions):
            p.add_(step * d)
    return (plus - minus) / (2 * step)


def piecewise_constant_integral(edges, sigma, color) -> tuple[np.ndarray, float]:
    """Volume rendering integral of an interval-aligned piecewise-constant field by adaptive quadrature.

    Integrates T(t) sigma(t) c(t) dt interval by interval with scipy, where the
    transmittance T(t) is evaluated from the analytic optical depth. Returns
    (color, opacity).
    """
    edges = np.asarray(edges, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    depth_before = np.concatenate([[0.0], np.cumsum(sigma * np.diff(edges))])
    rgb = np.zeros(color.shape[-1])
    opacity = 0.0
    for i in range(len(sigma)):
        t0 = edges[i]

        def integrand(t, i=i, t0=t0):
            return math.exp(-(depth_before[i] + sigma[i] * (t - t0))) * sigma[i]

        mass, _ = integrate.quad(integrand, t0, edges[i + 1], epsabs=0, epsrel=2e-14, limit=200)
        opacity += mass
        rgb += mass * color[i]
    return rgb, opacity


def dense_quadrature(sigma_fn, color_fn, t_near: float, t_far: float, n: int = 10_000):
    """Midpoint-rule reference of the rendering integral along one ray parameterized by t."""
    t = t_near + (np.arange(n) + 0.5) * (t_far - t_near) / n
    dt = (t_far - t_near) / n
    sig = sigma_fn(t)
    col = color_fn(t)
    tau = sig * dt
    trans = np.exp(-np.concatenate([[0.0], np.cumsum(tau)[:-1]]))
    w = trans * (1 - np.exp(-tau))
    return (w[:, None] * col).sum(axis=0), w.sum()


def naive_tv(b: np.ndarray) -> float:
    h, w, c = b.shape
    total_x = total_y = 0.0
    for r in range(h):
        for k in range(w):
            for ch in range(c):
                right = b[r, min(k + 1, w - 1), ch]
                down = b[min(r + 1, h - 1), k, ch]
                total_x += abs(right - b[r, k, ch])
                total_y += abs(down - b[r, k, ch])
    return total_x / (h * w * c) + total_y / (h * w * c)


def naive_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed SSIM written with explicit loops over valid window positions."""
    size, sigma = 11, 1.5
    x = np.arange(size) - 5
    g1 = np.exp(-x ** 2 / (2 * sigma ** 2))
    g = np.outer(g1, g1)
    g /= g.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w, ch = a.shape
    per_channel = []
    for c in range(ch):
        vals = []
        for r in range(h - size + 1):
            for k in range(w - size + 1):
                pa = a[r:r + size, k:k + size, c]
                pb = b[r:r + size, k:k + size, c]
                ma, mb = (g * pa).sum(), (g * pb).sum()
                va = (g * (pa - ma) ** 2).sum()
                vb = (g * (pb - mb) ** 2).sum()
                cov = (g * (pa - ma) * (pb - mb)).sum()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))
