"""Procedural multi-view rainy scenes with view-consistent 3D raindrops.

Scenes are a handful of textured analytic primitives lit by one directional
light. Raindrops live in 3D; each drop is rendered in every view as an
anti-aliased streak between the projections of its two motion endpoints, so
the same drop lands coherently in all cameras. Rain is composed additively:
``rainy = clip(clean + rain, 0, 1)``.

World coordinates are Y-up; cameras follow the conventions of ``dataset``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dataset as ds

Texture = Callable[[np.ndarray], np.ndarray]

BACKGROUND = (0.0, 0.0, 0.0)
FAR_SENTINEL = 1.0e4


class InvalidBoundsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# textures


def solid(color: Sequence[float]) -> Texture:
    c = np.asarray(color, dtype=np.float64)
    return lambda p: np.broadcast_to(c, p.shape).copy()


def checker(color_a: Sequence[float], color_b: Sequence[float], scale: float) -> Texture:
    a = np.asarray(color_a, dtype=np.float64)
    b = np.asarray(color_b, dtype=np.float64)

    def tex(p: np.ndarray) -> np.ndarray:
        parity = np.floor(p / scale).astype(np.int64).sum(axis=-1) % 2
        return np.where(parity[:, None] == 0, a, b)

    return tex


def waves(color_a: Sequence[float], color_b: Sequence[float], frequency: float) -> Texture:
    """Smooth sinusoidal blend; gives the field mid-frequency detail to learn."""
    a = np.asarray(color_a, dtype=np.float64)
    b = np.asarray(color_b, dtype=np.float64)

    def tex(p: np.ndarray) -> np.ndarray:
        m = 0.5 + 0.25 * (np.sin(frequency * p[:, 0]) + np.sin(frequency * 0.7 * p[:, 2] + 1.3 * p[:, 1]))
        return a + (b - a) * m[:, None]

    return tex


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Plane:
    """Finite axis-aligned rectangle at height ``y`` (normal +Y)."""

    y: float
    half_extent: float
    texture: Texture

    def intersect(self, o: np.ndarray, d: np.ndarray):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.y - o[:, 1]) / d[:, 1]
        p = o + t[:, None] * d
        hit = (t > 1e-9) & (np.abs(p[:, 0]) <= self.half_extent) & (np.abs(p[:, 2]) <= self.half_extent)
        normal = np.zeros_like(d)
        normal[:, 1] = np.where(d[:, 1] < 0, 1.0, -1.0)
        return np.where(hit, t, np.inf), normal


@dataclass
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: Texture

    def intersect(self, o: np.ndarray, d: np.ndarray):
        oc = o - np.asarray(self.center)
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        hit = (disc >= 0) & (t > 1e-9)
        t = np.where(hit, t, np.inf)
        p = o + np.where(hit, t, 0.0)[:, None] * d
        normal = (p - np.asarray(self.center)) / self.radius
        return t, normal


@dataclass
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    texture: Texture

    def intersect(self, o: np.ndarray, d: np.ndarray):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
        hit = (tmax >= tmin) & (tmax > 1e-9)
        t = np.where(tmin > 1e-9, tmin, tmax)
        t = np.where(hit, t, np.inf)
        p = o + np.where(hit, t, 0.0)[:, None] * d
        center, half = (lo + hi) / 2, (hi - lo) / 2
        rel = (p - center) / half
        axis = np.argmax(np.abs(rel), axis=-1)
        normal = np.zeros_like(d)
        normal[np.arange(len(d)), axis] = np.sign(rel[np.arange(len(d)), axis])
        return t, normal


@dataclass
class ProceduralScene:
    primitives: list
    light_dir: tuple[float, float, float] = (-0.4, -1.0, -0.3)
    ambient: float = 0.35
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-1.5, -0.1, -1.5), (1.5, 1.6, 1.5))


def default_scene() -> ProceduralScene:
    """A small outdoor-ish tableau: textured ground, two spheres and a block."""
    return ProceduralScene(
        primitives=[
            Plane(0.0, 1.3, checker((0.55, 0.5, 0.42), (0.32, 0.36, 0.3), 0.45)),
            Sphere((0.45, 0.45, 0.2), 0.45, waves((0.75, 0.25, 0.2), (0.95, 0.75, 0.3), 7.0)),
            Sphere((-0.55, 0.3, 0.5), 0.3, solid((0.25, 0.45, 0.8))),
            Box((-0.7, 0.0, -0.8), (0.1, 0.7, -0.3), checker((0.8, 0.8, 0.75), (0.45, 0.5, 0.6), 0.2)),
        ]
    )


def cast_rays(scene: ProceduralScene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest-hit distance (inf on miss) and shaded color for unit-direction rays."""
    m = len(origins)
    best_t = np.full(m, np.inf)
    color = np.tile(np.asarray(BACKGROUND, dtype=np.float64), (m, 1))
    if not scene.primitives:
        return best_t, color
    hits = [prim.intersect(origins, dirs) for prim in scene.primitives]
    stack = np.stack([t for t, _ in hits])
    which = np.argmin(stack, axis=0)
    best_t = stack[which, np.arange(m)]
    light = -np.asarray(scene.light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)
    for k, (prim, (_, normal)) in enumerate(zip(scene.primitives, hits)):
        sel = (which == k) & np.isfinite(best_t)
        if not np.any(sel):
            continue
        p = origins[sel] + best_t[sel, None] * dirs[sel]
        albedo = np.clip(prim.texture(p), 0.0, 1.0)
        lambert = np.maximum(0.0, normal[sel] @ light)
        color[sel] = albedo * (scene.ambient + (1.0 - scene.ambient) * lambert)[:, None]
    return best_t, np.clip(color, 0.0, 1.0)


def render_clean_view(scene: ProceduralScene, camera: ds.CameraRecord, h: int, w: int):
    """Ray-cast a clean image and its depth (Euclidean distance, FAR_SENTINEL on miss)."""
    c2w, intr = ds.camera_pose_from_record(camera, h, w)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dirs = ds.pixel_directions(c2w, intr, rows.ravel(), cols.ravel())
    origins = np.broadcast_to(c2w[:3, 3], dirs.shape)
    t, color = cast_rays(scene, origins, dirs)
    depth = np.where(np.isfinite(t), t, FAR_SENTINEL).reshape(h, w)
    return color.reshape(h, w, 3), depth


# ---------------------------------------------------------------------------
# rain


@dataclass
class RaindropField:
    positions: np.ndarray  # (m, 3)
    velocity_dirs: np.ndarray  # (m, 3) unit
    length: float
    radius: float
    intensities: np.ndarray  # (m,)
    seed: int

    def __len__(self) -> int:
        return len(self.positions)


def rain_direction(tilt_deg: float, azimuth_deg: float) -> np.ndarray:
    """Fall direction: straight down tilted by ``tilt_deg`` toward azimuth ``azimuth_deg`` (about +Y)."""
    tilt, az = math.radians(tilt_deg), math.radians(azimuth_deg)
    return np.array([math.sin(tilt) * math.cos(az), -math.cos(tilt), math.sin(tilt) * math.sin(az)])


def _jitter_directions(direction: np.ndarray, count: int, jitter_deg: float, rng: np.random.Generator) -> np.ndarray:
    base = direction / np.linalg.norm(direction)
    if jitter_deg <= 0:
        return np.tile(base, (count, 1))
    # small rotation of the base direction within a cone of half-angle jitter_deg
    helper = np.array([1.0, 0.0, 0.0]) if abs(base[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    u = np.cross(base, helper)
    u /= np.linalg.norm(u)
    v = np.cross(base, u)
    ang = np.deg2rad(jitter_deg) * np.sqrt(rng.random(count))
    phi = 2 * np.pi * rng.random(count)
    dirs = (np.cos(ang)[:, None] * base
            + np.sin(ang)[:, None] * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v))
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def sample_raindrop_field(bounds, density: float, direction: Sequence[float], rng: np.random.Generator | int,
                          length: float = 0.3, radius: float = 0.004, intensity: tuple[float, float] = (0.4, 0.8),
                          jitter_deg: float = 1.0) -> RaindropField:
    """Poisson(density * volume) drops placed uniformly in an axis-aligned box."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    volume = float(np.prod(hi - lo))
    if not volume > 0:
        raise InvalidBoundsError(f"bounds {bounds} have zero volume")
    if density < 0:
        raise ValueError("density must be nonnegative")
    direction = np.asarray(direction, dtype=np.float64)
    if np.linalg.norm(direction) == 0:
        raise ValueError("rain direction must be non-zero")
    if not 0 <= jitter_deg < 5:
        raise ValueError("jitter must be below 5 degrees")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else int(rng.integers(2 ** 31))
    gen = np.random.default_rng(seed)
    count = int(gen.poisson(density * volume))
    positions = lo + (hi - lo) * gen.random((count, 3))
    dirs = _jitter_directions(direction, count, jitter_deg, gen)
    lo_i, hi_i = intensity
    intensities = lo_i + (hi_i - lo_i) * gen.random(count)
    return RaindropField(positions, dirs, float(length), float(radius), intensities, seed)


def resample_fraction(field: RaindropField, bounds, fraction: float, rng: np.random.Generator) -> RaindropField:
    """Copy of ``field`` with a random ``fraction`` of drops moved to fresh positions."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    pos = field.positions.copy()
    idx = rng.random(len(pos)) < fraction
    pos[idx] = lo + (hi - lo) * rng.random((int(idx.sum()), 3))
    return replace(field, positions=pos)


def drop_segments(field: RaindropField, camera: ds.CameraRecord, h: int, w: int):
    """Projected streak endpoints ``(m, 2, 2)`` in (row, col), endpoint distances, and a validity mask."""
    c2w, intr = ds.camera_pose_from_record(camera, h, w)
    half = 0.5 * field.length * field.velocity_dirs
    ends = np.stack([field.positions - half, field.positions + half], axis=1)
    rc, zdepth = ds.project_points(c2w, intr, ends.reshape(-1, 3))
    rc = rc.reshape(-1, 2, 2)
    zdepth = zdepth.reshape(-1, 2)
    dist = np.linalg.norm(ends - c2w[:3, 3], axis=-1)
    valid = np.all(zdepth > 1e-3, axis=1)
    return rc, dist, valid


def draw_segment(canvas: np.ndarray, p0: np.ndarray, p1: np.ndarray, radius_px: float, intensity: float,
                 dist0: float | None = None, dist1: float | None = None, depth: np.ndarray | None = None) -> None:
    """Accumulate ``intensity * max(0, 1 - d / radius_px)`` around segment p0-p1 (row, col) into ``canvas``.

    When ``depth`` is given, pixels whose scene depth is nearer than the
    interpolated drop distance receive nothing.
    """
    h, w = canvas.shape[:2]
    rmin = int(max(0, math.floor(min(p0[0], p1[0]) - radius_px)))
    rmax = int(min(h - 1, math.ceil(max(p0[0], p1[0]) + radius_px)))
    cmin = int(max(0, math.floor(min(p0[1], p1[1]) - radius_px)))
    cmax = int(min(w - 1, math.ceil(max(p0[1], p1[1]) + radius_px)))
    if rmin > rmax or cmin > cmax:
        return
    rr, cc = np.meshgrid(np.arange(rmin, rmax + 1), np.arange(cmin, cmax + 1), indexing="ij")
    seg = p1 - p0
    seg_len2 = float(seg @ seg)
    if seg_len2 > 0:
        s = ((rr - p0[0]) * seg[0] + (cc - p0[1]) * seg[1]) / seg_len2
        s = np.clip(s, 0.0, 1.0)
    else:
        s = np.zeros(rr.shape)
    dr = rr - (p0[0] + s * seg[0])
    dc = cc - (p0[1] + s * seg[1])
    weight = intensity * np.maximum(0.0, 1.0 - np.sqrt(dr * dr + dc * dc) / radius_px)
    if depth is not None:
        drop_dist = dist0 + s * (dist1 - dist0)
        weight = np.where(drop_dist < depth[rr, cc], weight, 0.0)
    if canvas.ndim == 3:
        canvas[rmin:rmax + 1, cmin:cmax + 1] += weight[..., None]
    else:
        canvas[rmin:rmax + 1, cmin:cmax + 1] += weight


def render_rain_layer(field: RaindropField, camera: ds.CameraRecord, depth: np.ndarray, h: int, w: int,
                      min_radius_px: float = 0.8, max_length_px: float | None = None) -> np.ndarray:
    """Additive white streaks for every drop in front of the scene surface."""
    layer = np.zeros((h, w, 3))
    if len(field) == 0:
        return layer
    _, intr = ds.camera_pose_from_record(camera, h, w)
    rc, dist, valid = drop_segments(field, camera, h, w)
    if max_length_px is None:
        max_length_px = float(max(h, w))
    for k in np.flatnonzero(valid):
        p0, p1 = rc[k]
        if np.linalg.norm(p1 - p0) > max_length_px:
            continue
        mean_dist = 0.5 * (dist[k, 0] + dist[k, 1])
        radius_px = max(min_radius_px, field.radius * intr.fx / mean_dist)
        draw_segment(layer, p0, p1, radius_px, float(field.intensities[k]), dist[k, 0], dist[k, 1], depth)
    return layer


def render_streak_image(h: int, w: int, angle_deg: float, rng: np.random.Generator, count: int = 40,
                        length_px: float = 14.0, radius_px: float = 1.2, intensity: tuple[float, float] = (0.4, 0.9),
                        channels: int = 3) -> np.ndarray:
    """Image-space rain layer of parallel streaks at ``angle_deg``.

    The angle is measured from the +col axis toward +row (image x right, y down),
    the same frame in which gradient orientations are measured.
    """
    img = np.zeros((h, w, channels) if channels > 1 else (h, w))
    a = math.radians(angle_deg)
    step = 0.5 * length_px * np.array([math.sin(a), math.cos(a)])
    centers = rng.random((count, 2)) * [h, w]
    lo_i, hi_i = intensity
    for c, inten in zip(centers, lo_i + (hi_i - lo_i) * rng.random(count)):
        draw_segment(img, c - step, c + step, radius_px, float(inten))
    return img


# ---------------------------------------------------------------------------
# cameras and export


def cameras_on_sphere(count: int, radius: float = 4.0, elevation_deg: tuple[float, float] = (20.0, 40.0),
                      azimuth_span_deg: float = 100.0, target=(0.0, 0.0, 0.0), focal_length_mm: float = 35.0,
                      aperture_mm: tuple[float, float] = (36.0, 36.0)) -> list[ds.CameraRecord]:
    """Cameras in a two-row zigzag array on a sphere, all facing ``target``."""
    if count < 1:
        raise ValueError("need at least one camera")
    rows = 2 if count >= 4 else 1
    per_row = math.ceil(count / rows)
    records = []
    for i in range(count):
        row, k = divmod(i, per_row)
        if row % 2 == 1:
            k = per_row - 1 - k
        frac = k / max(1, per_row - 1)
        az = math.radians(-azimuth_span_deg / 2 + frac * azimuth_span_deg)
        el = math.radians(elevation_deg[0] + (elevation_deg[1] - elevation_deg[0]) * (row / max(1, rows - 1)))
        pos = np.asarray(target) + radius * np.array([math.cos(el) * math.sin(az), math.sin(el),
                                                      math.cos(el) * math.cos(az)])
        rot = ds.look_at_rotation(pos, target)
        records.append(ds.CameraRecord(
            name=f"cameraShape{i + 1}",
            position=tuple(float(round(v, 9)) for v in pos),
            rotation_euler_deg=tuple(float(round(v, 9)) for v in ds.matrix_to_euler(rot)),
            focal_length_mm=focal_length_mm,
            horizontal_aperture_mm=aperture_mm[0],
            vertical_aperture_mm=aperture_mm[1],
        ))
    return records


@dataclass
class RenderedView:
    clean: np.ndarray
    rain_layer: np.ndarray
    rainy: np.ndarray
    depth: np.ndarray


def render_view(scene: ProceduralScene, field: RaindropField, camera: ds.CameraRecord, h: int, w: int,
                **rain_kwargs) -> RenderedView:
    clean, depth = render_clean_view(scene, camera, h, w)
    rain = render_rain_layer(field, camera, depth, h, w, **rain_kwargs)
    return RenderedView(clean, rain, np.clip(clean + rain, 0.0, 1.0), depth)


def compose_and_export(scene: ProceduralScene, field: RaindropField, cameras: Sequence[ds.CameraRecord],
                       out_dir: str | Path, h: int, w: int, near_far=ds.DEFAULT_NEAR_FAR,
                       per_view_resample: float = 0.0) -> ds.SceneDataset:
    """Render every camera, write the scene directory and return the dataset as it loads back."""
    if len(cameras) < 2:
        raise ValueError("need at least two cameras")
    views = []
    for i, cam in enumerate(cameras):
        view_field = field
        if per_view_resample > 0:
            view_field = resample_fraction(field, scene.bounds, per_view_resample,
                                           np.random.default_rng([field.seed, i]))
        views.append(render_view(scene, view_field, cam, h, w))

    def to8(stack):
        return ds.quantize(np.stack(stack)).astype(np.float32) / 255.0

    rain8 = to8([v.rain_layer for v in views])
    clean8 = to8([v.clean for v in views])
    rainy8 = to8([v.rainy for v in views])
    data = ds.SceneDataset(
        images=rainy8,
        cameras=tuple(cameras),
        near_far=tuple(float(x) for x in near_far),
        clean_images=clean8,
        rain_layers=rain8,
        depth=np.stack([v.depth for v in views]).astype(np.float32),
    )
    ds.save_scene(data, out_dir)
    return data


# ---------------------------------------------------------------------------
# generator config


@dataclass
class RainSimConfig:
    density: float = 10.0
    tilt_deg: float = 20.0
    azimuth_deg: float = 0.0
    length: float = 0.25
    radius: float = 0.005
    intensity_min: float = 0.25
    intensity_max: float = 0.55
    jitter_deg: float = 1.0
    height: int = 64
    width: int = 64
    cameras: int = 8
    camera_radius: float = 4.0
    focal_length_mm: float = 50.0
    near: float = 2.0
    far: float = 6.0
    per_view_resample: float = 0.0
    seed: int = 0

    @classmethod
    def from_text(cls, text: str) -> "RainSimConfig":
        return cls.from_mapping(ds.parse_key_values(text))

    @classmethod
    def from_mapping(cls, values: dict) -> "RainSimConfig":
        known = {f.name: f for f in fields(cls)}
        aliases = {"size": ("height", "width"), "direction": ("tilt_deg", "azimuth_deg")}
        kwargs = {}
        for key, raw in values.items():
            if key in aliases:
                parts = str(raw).replace(",", " ").split()
                names = aliases[key]
                if len(parts) == 1:
                    parts = parts * 2
                for name, part in zip(names, parts):
                    kwargs[name] = int(float(part)) if name in ("height", "width") else float(part)
                continue
            if key not in known:
                raise ValueError(f"unknown generator key {key!r}")
            default = getattr(cls, key)
            kwargs[key] = int(float(raw)) if isinstance(default, int) else float(raw)
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def generate_scene(config: RainSimConfig, out_dir: str | Path, scene: ProceduralScene | None = None) -> ds.SceneDataset:
    scene = scene or default_scene()
    rng = np.random.default_rng(config.seed)
    cameras = cameras_on_sphere(config.cameras, radius=config.camera_radius, focal_length_mm=config.focal_length_mm)
    field = sample_raindrop_field(
        scene.bounds, config.density, rain_direction(config.tilt_deg, config.azimuth_deg), rng,
        length=config.length, radius=config.radius,
        intensity=(config.intensity_min, config.intensity_max), jitter_deg=config.jitter_deg,
    )
    return compose_and_export(scene, field, cameras, out_dir, config.height, config.width,
                              near_far=(config.near, config.far), per_view_resample=config.per_view_resample)
