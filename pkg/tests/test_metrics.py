import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from compinv.metrics import MetricsRow, compute_psnr_ssim, l2, psnr, ssim, write_report


def rand_img(seed, shape=(24, 24, 3)):
    return np.random.default_rng(seed).random(shape)


def test_identical():
    x = rand_img(0)
    assert psnr(x, x) == 99.0
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_uniform_offset():
    x = np.full((8, 8, 3), 0.5)
    assert l2(x, x + 0.1) == pytest.approx(0.01)
    assert psnr(x, x + 0.1) == pytest.approx(20.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_ssim_symmetric(seed):
    x, y = rand_img(seed), rand_img(seed + 1)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-15)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ssim_matches_reference_implementation(seed):
    x = rand_img(seed)
    y = np.clip(x + 0.1 * rand_img(seed + 10) - 0.05, 0, 1)
    _, smap = structural_similarity(x, y, channel_axis=-1, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0, full=True)
    # same map; the reference crops a 5-pixel border before averaging, we average everything
    assert ssim(x, y) == pytest.approx(float(smap.mean()), abs=1e-12)


def test_masked_regions():
    x = np.zeros((4, 4, 3))
    y = x.copy()
    y[:2] = 0.1
    m = np.zeros((4, 4))
    m[:2] = 1
    row = compute_psnr_ssim(x, y, m, frame=3)
    assert row.psnr_masked == pytest.approx(20.0)
    assert row.psnr_unmasked == 99.0
    assert row.frame == 3


def test_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_report_format(tmp_path):
    rows = [MetricsRow(0, 30.0, 0.9, 0.001, 25.0, 31.0), MetricsRow(1, 1 / 3, 0.5, 0.1, float("nan"), 20.0)]
    write_report(tmp_path / "r.csv", rows)
    raw = (tmp_path / "r.csv").read_bytes()
    assert b"\r" not in raw
    lines = raw.decode("utf-8").splitlines()
    assert lines[0] == "frame,psnr,ssim,l2,psnr_masked,psnr_unmasked"
    assert lines[2].split(",")[1] == "0.33333333333333331"
