import math

import numpy as np
import pytest

from handfield.metrics import MODES, EvalReport, ImageMetrics, depth_error, gaussian_window, psnr, ssim, ssim_map


def _img(seed=0, shape=(32, 32, 3)):
    return np.random.default_rng(seed).uniform(0, 1, shape)


def test_psnr_identical_is_capped():
    a = _img()
    assert psnr(a, a) == 99.0


def test_psnr_constant_offset():
    a = _img() * 0.8
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)


def test_psnr_single_pixel_mask():
    a = np.zeros((8, 8, 3))
    b = a.copy()
    b[3, 4] = 0.5
    mask = np.zeros((8, 8), bool)
    mask[3, 4] = True
    assert psnr(b, a, mask) == pytest.approx(-10 * math.log10(0.25), abs=1e-9)
    assert psnr(b, a, mask) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_mask_errors():
    a = _img()
    with pytest.raises(ValueError):
        psnr(a, a, np.zeros((32, 32), bool))
    with pytest.raises(ValueError):
        psnr(a, a, np.ones((4, 4), bool))
    with pytest.raises(ValueError):
        psnr(a, a[:8])


def test_ssim_identical():
    a = _img(1)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_inverted_binary():
    rng = np.random.default_rng(2)
    a = (rng.uniform(size=(32, 32)) > 0.5).astype(float)
    assert ssim(1 - a, a) < 0.1


def test_ssim_tiny_noise():
    a = _img(3)
    noisy = a + np.random.default_rng(4).normal(0, 1e-4, a.shape)
    assert ssim(noisy, a) >= 0.999


def test_ssim_matches_reference_implementation():
    metrics = pytest.importorskip("skimage.metrics")
    a, b = _img(5, (40, 36)), _img(6, (40, 36))
    b = 0.5 * a + 0.5 * b
    ref = metrics.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_ssim_window_and_size():
    g = gaussian_window()
    assert g.shape == (11,) and g.sum() == pytest.approx(1.0) and g.argmax() == 5
    assert ssim_map(_img(0, (20, 24)), _img(1, (20, 24))).shape == (10, 14)
    with pytest.raises(ValueError):
        ssim(_img(0, (10, 32)), _img(1, (10, 32)))


def test_depth_error_examples():
    rng = np.random.default_rng(7)
    d = rng.uniform(1.5, 3.0, (16, 16))
    assert depth_error(d, d) == 0.0
    assert depth_error(d + 0.05, d) == pytest.approx(0.05, abs=1e-12)
    off = rng.normal(0, 0.1, d.shape)
    assert depth_error(d + off, d) == pytest.approx(np.abs(off).mean(), abs=1e-12)


def test_depth_error_skips_background_and_mask():
    d = np.full((4, 4), 2.0)
    d[0] = np.inf
    pred = np.full((4, 4), 2.5)
    assert depth_error(pred, d) == pytest.approx(0.5)
    mask = np.zeros((4, 4), bool)
    mask[1, 1] = True
    pred[1, 1] = 2.1
    assert depth_error(pred, d, mask) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        depth_error(pred, np.full((4, 4), np.inf))


def test_report_aggregates_and_serializes():
    r = EvalReport("novel-view")
    assert r.count == 0 and all(math.isnan(v) for v in r.aggregate().values())
    r.add(ImageMetrics(0, "test0", 20.0, 18.0, 0.8, 0.01))
    r.add(ImageMetrics(0, "test1", 30.0, 28.0, 0.9, 0.03))
    agg = r.aggregate()
    assert agg == pytest.approx({"psnr": 25.0, "psnr_masked": 23.0, "ssim": 0.85, "depth_error": 0.02})
    d = r.to_dict()
    assert d["count"] == 2 and d["lpips"] is None and d["images"][1]["camera"] == "test1"
    lines = r.table().splitlines()
    assert len(lines) == 4 and lines[-1].startswith(" mean")


def test_report_validation():
    with pytest.raises(ValueError):
        EvalReport("bogus")
    assert len(MODES) == 3
    r = EvalReport(MODES[2])
    with pytest.raises(ValueError):
        r.add(ImageMetrics(0, "c", 10.0, 10.0, 1.5, 0.0))
    with pytest.raises(ValueError):
        r.add(ImageMetrics(0, "c", 10.0, 10.0, 0.5, -0.1))
