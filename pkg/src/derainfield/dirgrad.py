"""Directional image gradients and dominant gradient-orientation estimation.

Images are indexed ``(row, col[, channel])``. ``D_x`` differences along
columns, ``D_y`` along rows (downward), both forward differences with a
replicated border, so the last column / row has zero gradient. Orientation
``atan2(D_y, D_x)`` is taken modulo pi; for orientation statistics the axis
derivatives are measured with a derivative-of-Gaussian filter by default,
because forward differences of one-pixel-wide streaks are sampled half a pixel
apart in x and y and snap orientations toward the axes. A rain streak
elongated along angle ``a`` shows a dominant gradient orientation of
``a + 90`` degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

LUMA = (0.299, 0.587, 0.114)
DEFAULT_BINS = 60


class NoDominantDirectionError(ValueError):
    pass


def axis_gradients(image):
    """Forward differences ``(D_x, D_y)`` of an (H, W) or (H, W, C) array or tensor."""
    if torch.is_tensor(image):
        dx = torch.zeros_like(image)
        dy = torch.zeros_like(image)
    else:
        image = np.asarray(image, dtype=np.float64)
        dx = np.zeros_like(image)
        dy = np.zeros_like(image)
    dx[:, :-1] = image[:, 1:] - image[:, :-1]
    dy[:-1] = image[1:] - image[:-1]
    return dx, dy


def directional_gradient(image, theta: float):
    """``cos(theta) D_x f + sin(theta) D_y f``; differentiable for tensors."""
    dx, dy = axis_gradients(image)
    return math.cos(theta) * dx + math.sin(theta) * dy


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ np.asarray(LUMA)
    if image.ndim == 3:
        return image.mean(axis=-1)
    return image


@dataclass(frozen=True)
class OrientationHistogram:
    bins: np.ndarray
    total_mass: float

    @property
    def num_bins(self) -> int:
        return len(self.bins)

    @property
    def bin_width(self) -> float:
        return math.pi / len(self.bins)

    def centers(self) -> np.ndarray:
        return (np.arange(len(self.bins)) + 0.5) * self.bin_width

    def to_csv(self) -> str:
        rows = ["bin_center_deg,mass"]
        rows += [f"{math.degrees(c):.6g},{m:.9g}" for c, m in zip(self.centers(), self.bins)]
        return "\n".join(rows) + "\n"


def orientation_histogram(image, suppression: float = 50.0, num_bins: int = DEFAULT_BINS,
                          smoothing: float = 1.0) -> OrientationHistogram:
    """Magnitude-weighted histogram of gradient orientations over [0, pi).

    Pixels whose gradient magnitude falls below the ``suppression`` percentile
    contribute nothing. ``smoothing`` is the Gaussian scale (pixels) of the
    derivative filter; 0 uses plain forward differences.
    """
    if torch.is_tensor(image):
        image = image.detach().cpu().double().numpy()
    lum = luminance(image)
    if lum.shape[0] < 2 or lum.shape[1] < 2:
        raise ValueError("orientation histogram needs at least a 2x2 image")
    if smoothing > 0:
        dx = ndimage.gaussian_filter(lum, smoothing, order=(0, 1), mode="nearest")
        dy = ndimage.gaussian_filter(lum, smoothing, order=(1, 0), mode="nearest")
    else:
        dx, dy = axis_gradients(lum)
    mag = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), math.pi)
    theta[theta >= math.pi] = 0.0
    keep = (mag > 0) & (mag >= np.percentile(mag, suppression))
    idx = np.minimum((theta[keep] / (math.pi / num_bins)).astype(np.int64), num_bins - 1)
    bins = np.bincount(idx, weights=mag[keep], minlength=num_bins).astype(np.float64)
    return OrientationHistogram(bins, float(bins.sum()))


@dataclass(frozen=True)
class DominantDirections:
    angles_rad: np.ndarray
    masses: np.ndarray

    @property
    def k(self) -> int:
        return len(self.angles_rad)


def dominant_angles(hist: OrientationHistogram, k: int = 1, window: int = 2) -> DominantDirections:
    """Top-``k`` bin centers after circular non-max suppression over +-``window`` bins."""
    if not 1 <= k <= hist.num_bins:
        raise ValueError(f"k must be in [1, {hist.num_bins}]")
    if hist.total_mass <= 0:
        raise NoDominantDirectionError("orientation histogram has no mass")
    remaining = hist.bins.copy()
    picked = []
    n = hist.num_bins
    for _ in range(k):
        best = int(np.argmax(remaining))
        if remaining[best] <= 0:
            break
        picked.append(best)
        for off in range(-window, window + 1):
            remaining[(best + off) % n] = 0.0
    picked.sort()
    centers = hist.centers()
    return DominantDirections(centers[picked], hist.bins[picked])


def estimate_angles(image, k: int = 1, suppression: float = 50.0, num_bins: int = DEFAULT_BINS,
                    smoothing: float = 1.0) -> DominantDirections:
    return dominant_angles(orientation_histogram(image, suppression, num_bins, smoothing), k)
