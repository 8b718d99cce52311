import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from derainfield import evalpost as ep
from oracles import naive_ssim


# --- psnr ----------------------------------------------------------------------


def test_psnr_identical_is_cap():
    a = np.random.default_rng(0).random((8, 8, 3))
    assert ep.psnr(a, a) == ep.PSNR_CAP


def test_psnr_closed_form():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)
    assert ep.psnr(a, b) == pytest.approx(20.0, abs=1e-12)


def test_psnr_mse_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.random((12, 9, 3)), rng.random((12, 9, 3))
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += (a[idx] - b[idx]) ** 2
    assert abs(ep.psnr(a, b) - 10 * math.log10(a.size / total)) <= 1e-10


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        ep.psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# --- ssim ----------------------------------------------------------------------


def test_ssim_identical_is_one():
    a = np.random.default_rng(2).random((20, 20, 3))
    assert ep.ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_inverted_is_below_one():
    a = np.random.default_rng(3).random((16, 16))
    assert ep.ssim(a, 1 - a) < 1.0


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(4)
    a = rng.random((18, 15, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ep.ssim(a, b) - naive_ssim(a, b)) <= 1e-6


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ep.ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_gaussian_window():
    g = ep.gaussian_window()
    assert len(g) == 11 and g.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(g, g[::-1])


# --- masks and fusion -------------------------------------------------------------


def test_zero_map_zero_mask():
    assert not ep.rain_mask(np.zeros((6, 6, 3))).any()


def test_unit_map_full_mask():
    assert ep.rain_mask(np.ones((6, 6, 3)), ep.FusionConfig(threshold=0.5)).all()


def test_single_pixel_dilates_to_block():
    m = np.zeros((7, 7, 3))
    m[3, 4, 1] = 0.5
    mask = ep.rain_mask(m, ep.FusionConfig(0.02, 1))
    expected = np.zeros((7, 7), dtype=bool)
    expected[2:5, 3:6] = True
    np.testing.assert_array_equal(mask, expected)


def test_threshold_uses_strongest_channel():
    m = np.zeros((3, 3, 3))
    m[1, 1] = [0.0, 0.03, 0.0]
    assert ep.rain_mask(m, ep.FusionConfig(0.02, 0))[1, 1]


@pytest.mark.parametrize("kwargs", [dict(threshold=-0.1), dict(threshold=1.5), dict(dilation_radius=-1)])
def test_fusion_config_validation(kwargs):
    with pytest.raises(ValueError):
        ep.FusionConfig(**kwargs)


def test_fusion_extremes():
    rng = np.random.default_rng(5)
    rainy, render = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    np.testing.assert_array_equal(ep.selective_fusion(rainy, render, np.zeros((6, 6), bool)), rainy)
    np.testing.assert_array_equal(ep.selective_fusion(rainy, render, np.ones((6, 6), bool)), render)


def test_fusion_mask_shape_checked():
    with pytest.raises(ValueError):
        ep.selective_fusion(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 5), bool))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 6, 3), elements=st.floats(0, 1)), arrays(np.float64, (5, 6, 3), elements=st.floats(0, 1)),
       arrays(bool, (5, 6)))
def test_fusion_idempotent(rainy, render, mask):
    once = ep.selective_fusion(rainy, render, mask)
    np.testing.assert_array_equal(ep.selective_fusion(once, render, mask), once)


def test_exact_mask_fusion_never_hurts(small_scene):
    _, data = small_scene
    rng = np.random.default_rng(6)
    for i in range(data.n):
        clean = data.clean_images[i].astype(np.float64)
        rainy = data.images[i].astype(np.float64)
        render = np.clip(clean + rng.normal(0, 0.05, clean.shape), 0, 1)
        mask = np.any(rainy != clean, axis=-1)
        fused = ep.selective_fusion(rainy, render, mask)
        assert ep.psnr(fused, clean) >= ep.psnr(render, clean)


# --- reports --------------------------------------------------------------------


def test_clean_renders_give_perfect_report(small_scene):
    _, data = small_scene
    report = ep.evaluate(data, data.clean_images)
    for row in report.rows:
        assert row.psnr_render == ep.PSNR_CAP
        assert row.ssim_render == pytest.approx(1.0, abs=1e-12)


def test_rainy_renders_match_direct_metrics(small_scene):
    _, data = small_scene
    report = ep.evaluate(data, data.images)
    for i, row in enumerate(report.rows):
        assert row.psnr_render == ep.psnr(data.images[i], data.clean_images[i])
        assert row.ssim_render == ep.ssim(data.images[i], data.clean_images[i])


def test_report_means_and_csv(small_scene):
    _, data = small_scene
    renders = np.clip(data.clean_images + 0.05, 0, 1)
    report = ep.evaluate(data, renders, data.rain_layers, baseline={"rainy input": (20.0, 0.8)})
    for col in ep.MetricReport.COLUMNS[1:]:
        values = [getattr(r, col) for r in report.rows]
        assert abs(report.mean(col) - sum(values) / len(values)) <= 1e-10
    lines = report.to_csv().splitlines()
    assert lines[0] == "view,psnr_render,ssim_render,psnr_fused,ssim_fused"
    assert len(lines) == data.n + 1
    text = report.summary()
    assert "render+fusion" in text and "rainy input" in text and "threshold = 0.02" in text


def test_missing_ground_truth(small_scene):
    _, data = small_scene
    from derainfield.dataset import SceneDataset
    bare = SceneDataset(np.array(data.images), data.cameras, data.near_far)
    with pytest.raises(ep.MissingGroundTruthError):
        ep.evaluate(bare, data.images)


def test_render_shape_checked(small_scene):
    _, data = small_scene
    with pytest.raises(ValueError):
        ep.evaluate(data, data.images[:1])
