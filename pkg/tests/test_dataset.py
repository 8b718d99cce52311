import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from derainfield import dataset as ds

HEADER = ",".join(ds.CSV_FIELDS)


def make_dataset(cameras, h=8, w=8, n=None):
    n = n or len(cameras)
    images = np.zeros((n, h, w, 3), dtype=np.float32)
    return ds.SceneDataset(images=images, cameras=tuple(cameras))


def cam(name="c", position=(0.0, 0.0, 5.0), rotation=(0.0, 0.0, 0.0), focal=35.0, hap=36.0, vap=24.0):
    return ds.CameraRecord(name, tuple(position), tuple(rotation), focal, hap, vap)


# --- camera CSV -------------------------------------------------------------


def test_parse_single_row():
    recs = ds.parse_camera_csv(HEADER + "\ncameraShape1,0,0,5,0,0,0,35,36,24\n")
    assert len(recs) == 1
    assert recs[0].name == "cameraShape1"
    assert recs[0].position == (0.0, 0.0, 5.0)
    assert recs[0].focal_length_mm == 35.0
    assert recs[0].horizontal_aperture_mm == 36.0
    assert recs[0].vertical_aperture_mm == 24.0


def test_parse_empty_data_section():
    assert ds.parse_camera_csv(HEADER + "\n") == []


def test_parse_non_numeric_cell_names_row():
    text = HEADER + "\na,0,0,5,0,0,0,35,36,24\nb,0,0,5,0,0,0,abc,36,24\n"
    with pytest.raises(ds.CameraParseError) as info:
        ds.parse_camera_csv(text)
    assert info.value.row == 2
    assert info.value.column == "Focal Length"


def test_parse_missing_column_names_it():
    header = ",".join(f for f in ds.CSV_FIELDS if f != "Vertical Aperture")
    with pytest.raises(ds.SchemaError, match="Vertical Aperture"):
        ds.parse_camera_csv(header + "\n")


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
positive = st.floats(1e-3, 1e3, allow_nan=False, allow_infinity=False)
records = st.builds(
    ds.CameraRecord,
    st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_", min_size=1, max_size=12),
    st.tuples(finite, finite, finite),
    st.tuples(finite, finite, finite),
    positive, positive, positive,
)


@given(st.lists(records, max_size=6))
def test_csv_round_trip_is_fixed_point(recs):
    text = ds.serialize_camera_csv(recs)
    parsed = ds.parse_camera_csv(text)
    assert parsed == recs
    assert ds.serialize_camera_csv(parsed) == text


# --- camera geometry --------------------------------------------------------


def test_identity_rotation():
    c2w, _ = ds.camera_pose_from_record(cam(), 24, 36)
    np.testing.assert_allclose(c2w[:3, :3], np.eye(3), atol=1e-15)


def test_rotation_180_about_y():
    c2w, _ = ds.camera_pose_from_record(cam(rotation=(0, 180, 0)), 24, 36)
    np.testing.assert_allclose(c2w[:3, :3], np.diag([-1.0, 1.0, -1.0]), atol=1e-12)


def test_pixel_focal_hand_computed():
    _, intr = ds.camera_pose_from_record(cam(focal=35, hap=36, vap=24), 480, 720)
    assert intr.fx == pytest.approx(700.0)
    assert intr.fy == pytest.approx(35 * 480 / 24)
    assert (intr.cx, intr.cy) == (360.0, 240.0)


def test_zero_aperture_rejected():
    with pytest.raises(ds.InvalidCameraError):
        ds.camera_pose_from_record(cam(hap=0.0), 8, 8)


@given(st.tuples(finite, finite, finite))
def test_rotation_block_orthonormal(angles):
    rot = ds.euler_to_matrix(angles)
    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-6)


@given(st.tuples(st.floats(-170, 170), st.floats(-80, 80), st.floats(-170, 170)))
def test_matrix_to_euler_inverts(angles):
    back = ds.matrix_to_euler(ds.euler_to_matrix(angles))
    np.testing.assert_allclose(back, angles, atol=1e-7)


# --- rays -------------------------------------------------------------------


def test_identity_pose_center_ray_is_forward():
    data = make_dataset([cam(), cam("d")], h=8, w=8)
    bundle = ds.generate_rays(data, 0)
    assert len(bundle) == 64
    center = bundle[4 * 8 + 4]
    assert center.pixel_coord == (4, 4)
    np.testing.assert_allclose(center.direction, [0.0, 0.0, -1.0], atol=1e-12)


def test_ray_count_and_norms(small_scene):
    _, data = small_scene
    for i in range(data.n):
        bundle = ds.generate_rays(data, i)
        assert len(bundle) == data.hw[0] * data.hw[1]
        np.testing.assert_allclose(np.linalg.norm(bundle.directions, axis=1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(bundle.origins, np.broadcast_to(data.cameras[i].position, bundle.origins.shape))


def test_out_of_range_view():
    data = make_dataset([cam(), cam("d")])
    with pytest.raises(IndexError):
        ds.generate_rays(data, 2)


def test_mirrored_cameras_have_antiparallel_center_rays():
    p = np.array([1.3, 0.7, 3.1])
    r1 = ds.matrix_to_euler(ds.look_at_rotation(p, (0, 0, 0)))
    r2 = ds.matrix_to_euler(ds.look_at_rotation(-p, (0, 0, 0)))
    data = make_dataset([cam("a", p, r1), cam("b", -p, r2)], h=16, w=16)
    d1 = ds.generate_rays(data, 0)[8 * 16 + 8].direction
    d2 = ds.generate_rays(data, 1)[8 * 16 + 8].direction
    np.testing.assert_allclose(d1, -d2, atol=1e-6)
    np.testing.assert_allclose(d1, -p / np.linalg.norm(p), atol=1e-6)


def test_project_inverts_pixel_directions():
    record = cam(position=(0.5, 1.0, 4.0), rotation=(-10.0, 20.0, 5.0))
    c2w, intr = ds.camera_pose_from_record(record, 30, 40)
    rows, cols = np.array([0.0, 7.5, 29.0]), np.array([0.0, 20.0, 39.0])
    dirs = ds.pixel_directions(c2w, intr, rows, cols)
    points = c2w[:3, 3] + 3.0 * dirs
    rc, depth = ds.project_points(c2w, intr, points)
    np.testing.assert_allclose(rc, np.stack([rows, cols], axis=1), atol=1e-9)
    assert np.all(depth > 0)


# --- patches ----------------------------------------------------------------


def test_full_size_patch_at_origin(rng):
    data = make_dataset([cam(), cam("d")], h=8, w=8)
    for _ in range(5):
        assert ds.sample_patch(data, 0, 8, rng).top_left == (0, 0)


def test_patch_deterministic_under_seed(small_scene):
    _, data = small_scene
    a = ds.sample_patch(data, 1, 8, np.random.default_rng(5))
    b = ds.sample_patch(data, 1, 8, np.random.default_rng(5))
    assert a.top_left == b.top_left
    np.testing.assert_array_equal(a.rays.directions, b.rays.directions)


def test_patch_too_large():
    data = make_dataset([cam(), cam("d")], h=8, w=8)
    with pytest.raises(ValueError):
        ds.sample_patch(data, 0, 9, np.random.default_rng(0))


def test_patch_alignment_with_full_view(small_scene, rng):
    _, data = small_scene
    patch = ds.sample_patch(data, 2, 8, rng)
    full = ds.generate_rays(data, 2)
    r0, c0 = patch.top_left
    h, w = data.hw
    for k, ray in enumerate(patch.rays):
        r, c = divmod(k, patch.size)
        assert ray.pixel_coord == (r0 + r, c0 + c)
        np.testing.assert_array_equal(ray.direction, full.directions[(r0 + r) * w + c0 + c])
    np.testing.assert_array_equal(patch.target_pixels, data.images[2, r0:r0 + 8, c0:c0 + 8])


def test_patch_placement_uniform():
    data = make_dataset([cam(), cam("d")], h=128, w=128)
    rng = np.random.default_rng(0)
    counts = np.zeros((65, 65))
    for _ in range(10_000):
        r, c = ds.sample_patch(data, 0, 64, rng).top_left
        counts[r, c] += 1
    # marginals keep the expected count per cell large enough for chi-square
    for axis in (0, 1):
        marginal = counts.sum(axis=axis)
        assert stats.chisquare(marginal).pvalue > 0.01
    assert counts.sum() == 10_000


# --- scene directories ------------------------------------------------------


def test_load_counts_and_round_trip(small_scene, tmp_path):
    path, data = small_scene
    loaded = ds.load_scene(path)
    assert loaded.n == 4 and loaded.hw == (32, 32)
    np.testing.assert_array_equal(loaded.images, data.images)
    np.testing.assert_array_equal(loaded.clean_images, data.clean_images)
    np.testing.assert_array_equal(loaded.depth, data.depth)
    assert loaded.cameras == data.cameras
    ds.save_scene(loaded, tmp_path / "copy")
    again = ds.load_scene(tmp_path / "copy")
    np.testing.assert_array_equal(again.images, loaded.images)
    np.testing.assert_array_equal(again.rain_layers, loaded.rain_layers)
    assert again.near_far == loaded.near_far
    for sub in ("rainy", "clean", "rain"):
        for a, b in zip(sorted((path / sub).iterdir()), sorted((tmp_path / "copy" / sub).iterdir())):
            assert a.name == b.name


def test_count_mismatch(small_scene, tmp_path):
    path, data = small_scene
    ds.save_scene(data, tmp_path / "s")
    lines = (tmp_path / "s" / "cameras.csv").read_text().splitlines()
    (tmp_path / "s" / "cameras.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ds.SceneLoadError, match="camera rows"):
        ds.load_scene(tmp_path / "s")


def test_undecodable_image_names_file(small_scene, tmp_path):
    _, data = small_scene
    ds.save_scene(data, tmp_path / "s")
    bad = tmp_path / "s" / "rainy" / "002.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(ds.SceneIOError, match="002.png"):
        ds.load_scene(tmp_path / "s")


def test_views_sorted_numerically(tmp_path):
    images = np.stack([np.full((4, 4, 3), v / 20, dtype=np.float32) for v in range(12)])
    images = ds.quantize(images).astype(np.float32) / 255
    data = ds.SceneDataset(images=images, cameras=tuple(cam(f"c{i}") for i in range(12)))
    ds.save_scene(data, tmp_path)
    # 1000.png-style names sort wrongly as strings; rename to unpadded numbers
    for p in list((tmp_path / "rainy").iterdir()):
        p.rename(p.with_name(f"{int(p.stem)}.png"))
    loaded = ds.load_scene(tmp_path)
    np.testing.assert_array_equal(loaded.images, data.images)


@settings(max_examples=20)
@given(st.integers(1, 6), st.integers(1, 6))
def test_depth_round_trip(h, w):
    import tempfile
    from pathlib import Path

    depth = np.random.default_rng(h * 7 + w).random((h, w)).astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        ds.write_depth(Path(d) / "x.bin", depth)
        raw = (Path(d) / "x.bin").read_bytes()
        assert raw.startswith(f"DEPTH {h} {w}\n".encode())
        np.testing.assert_array_equal(ds.read_depth(Path(d) / "x.bin"), depth)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        make_dataset([cam()], n=1)
    with pytest.raises(ValueError):
        ds.SceneDataset(images=np.full((2, 4, 4, 3), 1.5, dtype=np.float32), cameras=(cam(), cam("d")))
    with pytest.raises(ValueError):
        ds.SceneDataset(images=np.zeros((2, 4, 4, 3), dtype=np.float32), cameras=(cam(), cam("d")),
                        near_far=(3.0, 2.0))
