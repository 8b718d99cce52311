"""Multi-view rainy scene loading, camera geometry, ray generation and patch sampling.

Scene directory layout::

    rainy/001.png ...      8-bit RGB views, numbered
    clean/001.png ...      optional ground-truth backgrounds
    rain/001.png ...       optional ground-truth rain layers
    depth/001.bin ...      optional depth maps (see ``write_depth``)
    cameras.csv            one row per view
    meta.txt               key=value lines (near, far)

Cameras look down their local -Z axis with +Y up. Euler angles are applied as
``R = Rz @ Ry @ Rx`` (rotate about X first, then Y, then Z, in world axes).
Pixel ``(row, col)`` sits at image-plane coordinate ``(col, row)`` and the
principal point is ``(w / 2, h / 2)``, so for even sizes pixel ``(h // 2, w // 2)``
looks straight down the optical axis.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

CSV_FIELDS = (
    "Camera Name",
    "Position X",
    "Position Y",
    "Position Z",
    "Rotation X",
    "Rotation Y",
    "Rotation Z",
    "Focal Length",
    "Horizontal Aperture",
    "Vertical Aperture",
)

DEFAULT_NEAR_FAR = (2.0, 6.0)


class SchemaError(ValueError):
    """Camera CSV is missing a required column."""


class CameraParseError(ValueError):
    """A camera CSV cell could not be parsed."""

    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"row {row}: column {column!r} has non-numeric value {value!r}")
        self.row = row
        self.column = column


class InvalidCameraError(ValueError):
    pass


class SceneLoadError(ValueError):
    pass


class SceneIOError(OSError):
    pass


@dataclass(frozen=True)
class CameraRecord:
    name: str
    position: tuple[float, float, float]
    rotation_euler_deg: tuple[float, float, float]
    focal_length_mm: float
    horizontal_aperture_mm: float
    vertical_aperture_mm: float


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel_coord: tuple[int, int]
    view_index: int


@dataclass(frozen=True)
class RayBundle:
    """Row-major batch of rays from a single view, stored as arrays."""

    origins: np.ndarray  # (M, 3)
    directions: np.ndarray  # (M, 3), unit norm
    pixels: np.ndarray  # (M, 2) int (row, col)
    view_index: int

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, k: int) -> Ray:
        r, c = self.pixels[k]
        return Ray(self.origins[k], self.directions[k], (int(r), int(c)), self.view_index)

    def __iter__(self) -> Iterator[Ray]:
        return (self[k] for k in range(len(self)))


@dataclass(frozen=True)
class PatchSample:
    view_index: int
    top_left: tuple[int, int]
    size: int
    rays: RayBundle
    target_pixels: np.ndarray  # (size, size, 3)


@dataclass(frozen=True)
class SceneDataset:
    """Posed multi-view images. Arrays are read-only once constructed."""

    images: np.ndarray  # (n, h, w, 3) float32 in [0, 1]
    cameras: tuple[CameraRecord, ...]
    near_far: tuple[float, float] = DEFAULT_NEAR_FAR
    clean_images: np.ndarray | None = None
    rain_layers: np.ndarray | None = None
    depth: np.ndarray | None = None  # (n, h, w)
    _poses: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        imgs = self.images
        if imgs.ndim != 4 or imgs.shape[-1] != 3:
            raise ValueError(f"images must be (n, h, w, 3), got {imgs.shape}")
        if imgs.shape[0] < 2:
            raise ValueError("a scene needs at least two views")
        if len(self.cameras) != imgs.shape[0]:
            raise SceneLoadError(f"{imgs.shape[0]} images but {len(self.cameras)} cameras")
        if imgs.min() < 0 or imgs.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        near, far = self.near_far
        if not 0 < near < far:
            raise ValueError(f"invalid near/far bounds {self.near_far}")
        for name in ("clean_images", "rain_layers"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != imgs.shape:
                raise ValueError(f"{name} shape {arr.shape} != images shape {imgs.shape}")
        if self.depth is not None and self.depth.shape != imgs.shape[:3]:
            raise ValueError(f"depth shape {self.depth.shape} != {imgs.shape[:3]}")
        for name in ("images", "clean_images", "rain_layers", "depth"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)
        h, w = imgs.shape[1:3]
        poses = tuple(camera_pose_from_record(cam, h, w) for cam in self.cameras)
        object.__setattr__(self, "_poses", poses)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def pose(self, view_index: int) -> tuple[np.ndarray, Intrinsics]:
        return self._poses[view_index]


# ---------------------------------------------------------------------------
# camera CSV


def _format_number(x: float) -> str:
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def parse_camera_csv(text: str) -> list[CameraRecord]:
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if any(cell.strip() for cell in row)]
    if not rows:
        raise SchemaError("camera CSV has no header row")
    header = [h.strip() for h in rows[0]]
    for name in CSV_FIELDS:
        if name not in header:
            raise SchemaError(f"camera CSV is missing column {name!r}")
    col = {name: header.index(name) for name in CSV_FIELDS}

    records = []
    for row_index, row in enumerate(rows[1:], start=1):
        values = {}
        for name in CSV_FIELDS[1:]:
            cell = row[col[name]].strip() if col[name] < len(row) else ""
            try:
                values[name] = float(cell)
            except ValueError:
                raise CameraParseError(row_index, name, cell) from None
        records.append(
            CameraRecord(
                name=row[col["Camera Name"]].strip(),
                position=(values["Position X"], values["Position Y"], values["Position Z"]),
                rotation_euler_deg=(values["Rotation X"], values["Rotation Y"], values["Rotation Z"]),
                focal_length_mm=values["Focal Length"],
                horizontal_aperture_mm=values["Horizontal Aperture"],
                vertical_aperture_mm=values["Vertical Aperture"],
            )
        )
    return records


def serialize_camera_csv(records: Sequence[CameraRecord]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for rec in records:
        nums = (
            *rec.position,
            *rec.rotation_euler_deg,
            rec.focal_length_mm,
            rec.horizontal_aperture_mm,
            rec.vertical_aperture_mm,
        )
        writer.writerow([rec.name, *(_format_number(v) for v in nums)])
    return out.getvalue()


# ---------------------------------------------------------------------------
# geometry


def euler_to_matrix(rotation_euler_deg: Sequence[float]) -> np.ndarray:
    ax, ay, az = np.deg2rad(np.asarray(rotation_euler_deg, dtype=np.float64))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def matrix_to_euler(rot: np.ndarray) -> tuple[float, float, float]:
    """Inverse of ``euler_to_matrix`` (degrees), away from gimbal lock."""
    ay = np.arcsin(np.clip(-rot[2, 0], -1.0, 1.0))
    ax = np.arctan2(rot[2, 1], rot[2, 2])
    az = np.arctan2(rot[1, 0], rot[0, 0])
    return tuple(float(v) for v in np.rad2deg([ax, ay, az]))


def look_at_rotation(position: Sequence[float], target: Sequence[float], up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise InvalidCameraError("look-at direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    return np.stack([right, true_up, -forward], axis=1)


def camera_pose_from_record(rec: CameraRecord, h: int, w: int) -> tuple[np.ndarray, Intrinsics]:
    """Return the 4x4 world-from-camera matrix and pixel intrinsics for an h x w image."""
    if rec.focal_length_mm <= 0:
        raise InvalidCameraError(f"{rec.name}: focal length must be positive")
    if rec.horizontal_aperture_mm <= 0 or rec.vertical_aperture_mm <= 0:
        raise InvalidCameraError(f"{rec.name}: apertures must be positive")
    if not np.all(np.isfinite(rec.rotation_euler_deg)):
        raise InvalidCameraError(f"{rec.name}: non-finite rotation")
    c2w = np.eye(4)
    c2w[:3, :3] = euler_to_matrix(rec.rotation_euler_deg)
    c2w[:3, 3] = rec.position
    intr = Intrinsics(
        fx=rec.focal_length_mm * w / rec.horizontal_aperture_mm,
        fy=rec.focal_length_mm * h / rec.vertical_aperture_mm,
        cx=w / 2.0,
        cy=h / 2.0,
    )
    return c2w, intr


def pixel_directions(c2w: np.ndarray, intr: Intrinsics, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Unit world-space ray directions through the given pixel coordinates (may be fractional)."""
    cam = np.stack(
        [
            (np.asarray(cols, dtype=np.float64) - intr.cx) / intr.fx,
            -(np.asarray(rows, dtype=np.float64) - intr.cy) / intr.fy,
            -np.ones(np.shape(rows)),
        ],
        axis=-1,
    )
    world = cam @ c2w[:3, :3].T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def project_points(c2w: np.ndarray, intr: Intrinsics, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to (row, col) pixel coordinates.

    Returns ``(rc, depth)`` where ``depth`` is the distance along the optical axis
    (positive in front of the camera).
    """
    rot, t = c2w[:3, :3], c2w[:3, 3]
    cam = (np.asarray(points, dtype=np.float64) - t) @ rot
    depth = -cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        col = intr.fx * cam[..., 0] / depth + intr.cx
        row = -intr.fy * cam[..., 1] / depth + intr.cy
    return np.stack([row, col], axis=-1), depth


def generate_rays(dataset: SceneDataset, view_index: int) -> RayBundle:
    if not 0 <= view_index < dataset.n:
        raise IndexError(f"view {view_index} out of range for {dataset.n} views")
    h, w = dataset.hw
    c2w, intr = dataset.pose(view_index)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dirs = pixel_directions(c2w, intr, rows.ravel(), cols.ravel())
    origins = np.broadcast_to(c2w[:3, 3], dirs.shape).copy()
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=-1)
    return RayBundle(origins, dirs, pixels, view_index)


def all_rays(dataset: SceneDataset) -> tuple[np.ndarray, np.ndarray]:
    """Origins and directions for every pixel of every view, shape (n, h, w, 3)."""
    n = dataset.n
    h, w = dataset.hw
    bundles = [generate_rays(dataset, i) for i in range(n)]
    origins = np.stack([b.origins for b in bundles]).reshape(n, h, w, 3)
    dirs = np.stack([b.directions for b in bundles]).reshape(n, h, w, 3)
    return origins, dirs


def sample_patch(dataset: SceneDataset, view_index: int, size: int, rng: np.random.Generator,
                 top_left: tuple[int, int] | None = None) -> PatchSample:
    """Uniformly placed square patch of a view, with its rays in row-major order."""
    h, w = dataset.hw
    if size < 1 or size > min(h, w):
        raise ValueError(f"patch size {size} does not fit a {h}x{w} image")
    if not 0 <= view_index < dataset.n:
        raise IndexError(f"view {view_index} out of range for {dataset.n} views")
    if top_left is None:
        top_left = (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
    r0, c0 = top_left
    if not (0 <= r0 <= h - size and 0 <= c0 <= w - size):
        raise ValueError(f"patch at {top_left} leaves the image")
    c2w, intr = dataset.pose(view_index)
    rows, cols = np.meshgrid(np.arange(r0, r0 + size), np.arange(c0, c0 + size), indexing="ij")
    dirs = pixel_directions(c2w, intr, rows.ravel(), cols.ravel())
    origins = np.broadcast_to(c2w[:3, 3], dirs.shape).copy()
    rays = RayBundle(origins, dirs, np.stack([rows.ravel(), cols.ravel()], axis=-1), view_index)
    target = np.array(dataset.images[view_index, r0:r0 + size, c0:c0 + size])
    return PatchSample(view_index, (r0, c0), size, rays, target)


# ---------------------------------------------------------------------------
# files


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # PIL raises a zoo of types
        raise SceneIOError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(quantize(image), mode="RGB").save(path)


def write_depth(path: Path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(f"DEPTH {h} {w}\n".encode("ascii"))
        f.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    header, _, body = data.partition(b"\n")
    parts = header.decode("ascii", errors="replace").split()
    if len(parts) != 3 or parts[0] != "DEPTH":
        raise SceneIOError(f"{path}: bad depth header {header[:32]!r}")
    h, w = int(parts[1]), int(parts[2])
    if len(body) != 4 * h * w:
        raise SceneIOError(f"{path}: expected {4 * h * w} bytes of depth, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _numbered_pngs(directory: Path) -> list[Path]:
    files = [p for p in directory.iterdir() if p.suffix.lower() == ".png" and re.fullmatch(r"\d+", p.stem)]
    return sorted(files, key=lambda p: int(p.stem))


def load_scene(directory: str | Path) -> SceneDataset:
    root = Path(directory)
    rainy_dir = root / "rainy"
    if not rainy_dir.is_dir():
        raise SceneLoadError(f"{root}: missing rainy/ directory")
    files = _numbered_pngs(rainy_dir)
    csv_path = root / "cameras.csv"
    if not csv_path.is_file():
        raise SceneLoadError(f"{root}: missing cameras.csv")
    cameras = parse_camera_csv(csv_path.read_text())
    if len(cameras) != len(files):
        raise SceneLoadError(f"{root}: {len(files)} images but {len(cameras)} camera rows")

    images = np.stack([read_png(p) for p in files])

    def optional_stack(sub: str) -> np.ndarray | None:
        d = root / sub
        if not d.is_dir():
            return None
        extra = {p.stem: p for p in _numbered_pngs(d)}
        missing = [p.stem for p in files if p.stem not in extra]
        if missing:
            raise SceneLoadError(f"{d}: missing views {missing}")
        return np.stack([read_png(extra[p.stem]) for p in files])

    depth = None
    depth_dir = root / "depth"
    if depth_dir.is_dir():
        depth = np.stack([read_depth(depth_dir / f"{p.stem}.bin") for p in files])

    near_far = DEFAULT_NEAR_FAR
    meta_path = root / "meta.txt"
    if meta_path.is_file():
        meta = parse_key_values(meta_path.read_text())
        near_far = (float(meta.get("near", near_far[0])), float(meta.get("far", near_far[1])))

    return SceneDataset(
        images=images,
        cameras=tuple(cameras),
        near_far=near_far,
        clean_images=optional_stack("clean"),
        rain_layers=optional_stack("rain"),
        depth=depth,
    )


def save_scene(dataset: SceneDataset, directory: str | Path) -> None:
    """Write a dataset in the scene directory layout (images quantized to 8 bits)."""
    root = Path(directory)
    width = max(3, len(str(dataset.n)))
    subdirs = {"rainy": dataset.images, "clean": dataset.clean_images, "rain": dataset.rain_layers}
    try:
        for sub, stack in subdirs.items():
            if stack is None:
                continue
            (root / sub).mkdir(parents=True, exist_ok=True)
            for i, img in enumerate(stack):
                write_png(root / sub / f"{i + 1:0{width}d}.png", img)
        if dataset.depth is not None:
            (root / "depth").mkdir(parents=True, exist_ok=True)
            for i, d in enumerate(dataset.depth):
                write_depth(root / "depth" / f"{i + 1:0{width}d}.bin", d)
        (root / "cameras.csv").write_text(serialize_camera_csv(dataset.cameras))
        near, far = dataset.near_far
        (root / "meta.txt").write_text(f"near={_format_number(near)}\nfar={_format_number(far)}\n")
    except OSError as exc:
        raise SceneIOError(f"cannot write scene to {root}: {exc}") from exc
