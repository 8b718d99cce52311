"""Image metrics, rain-mask fusion and per-scene evaluation reports."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; identical inputs give ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


@dataclass(frozen=True)
class FusionConfig:
    threshold: float = 0.02
    dilation_radius: int = 1

    def __post_init__(self):
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")
        if self.dilation_radius < 0:
            raise ValueError("dilation radius must be nonnegative")


def rain_mask(rain_map, config: FusionConfig = FusionConfig()) -> np.ndarray:
    """Binary mask of pixels whose strongest rain channel exceeds the threshold, dilated by a square."""
    rain_map = np.asarray(rain_map, dtype=np.float64)
    peak = rain_map.max(axis=-1) if rain_map.ndim == 3 else rain_map
    mask = peak > config.threshold
    r = config.dilation_radius
    if r > 0 and mask.any():
        mask = ndimage.binary_dilation(mask, structure=np.ones((2 * r + 1, 2 * r + 1), dtype=bool))
    return mask


def selective_fusion(rainy, rendered, mask) -> np.ndarray:
    """Rendered pixels under the mask, input pixels elsewhere."""
    rainy, rendered = _pair(rainy, rendered)
    mask = np.asarray(mask)
    if mask.shape != rainy.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {rainy.shape[:2]}")
    return np.where(mask[..., None].astype(bool), rendered, rainy)


@dataclass
class ViewMetrics:
    view: int
    psnr_render: float
    ssim_render: float
    psnr_fused: float
    ssim_fused: float


@dataclass
class MetricReport:
    rows: list[ViewMetrics]
    config: dict = field(default_factory=dict)
    baseline: dict | None = None

    COLUMNS = ("view", "psnr_render", "ssim_render", "psnr_fused", "ssim_fused")

    def mean(self, column: str) -> float:
        return float(np.mean([getattr(r, column) for r in self.rows]))

    def means(self) -> dict[str, float]:
        return {c: self.mean(c) for c in self.COLUMNS[1:]}

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(self.COLUMNS) + "\n")
        for r in self.rows:
            out.write(f"{r.view},{r.psnr_render:.6f},{r.ssim_render:.6f},{r.psnr_fused:.6f},{r.ssim_fused:.6f}\n")
        return out.getvalue()

    def summary(self, method: str = "render") -> str:
        m = self.means()
        lines = [
            f"{'Method':<16}{'PSNR':>10}{'SSIM':>10}",
            f"{method:<16}{m['psnr_render']:>10.2f}{m['ssim_render']:>10.3f}",
            f"{method + '+fusion':<16}{m['psnr_fused']:>10.2f}{m['ssim_fused']:>10.3f}",
        ]
        if self.baseline:
            for name, (p, s) in self.baseline.items():
                lines.append(f"{name:<16}{p:>10.2f}{s:>10.3f}")
        lines.append("LPIPS not reported (requires pretrained perceptual weights).")
        for key, value in sorted(self.config.items()):
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


class MissingGroundTruthError(ValueError):
    pass


def evaluate(dataset, renders, rain_maps=None, config: FusionConfig = FusionConfig(),
             baseline: dict | None = None) -> MetricReport:
    """Per-view PSNR/SSIM of raw renders and of their fusion with the rainy inputs."""
    if dataset.clean_images is None:
        raise MissingGroundTruthError("scene has no clean ground truth")
    renders = np.asarray(renders, dtype=np.float64)
    if renders.shape != dataset.images.shape:
        raise ValueError(f"renders shape {renders.shape} != scene {dataset.images.shape}")
    rows = []
    for i in range(dataset.n):
        clean = dataset.clean_images[i]
        render = np.clip(renders[i], 0.0, 1.0)
        if rain_maps is None:
            fused = render
        else:
            fused = selective_fusion(dataset.images[i], render, rain_mask(rain_maps[i], config))
        rows.append(ViewMetrics(i, psnr(render, clean), ssim(render, clean), psnr(fused, clean), ssim(fused, clean)))
    echo = {"threshold": config.threshold, "dilation_radius": config.dilation_radius, "views": dataset.n}
    return MetricReport(rows, echo, baseline)
