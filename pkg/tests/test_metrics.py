import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dair.data import ImageBuffer
from dair.metrics import PSNR_CAP, MetricRecord, MetricReport, psnr, rmse, ssim
from dair.tensor import StructuralError
from oracles import psnr_loop, rmse_loop, ssim_loop


def rand(shape, seed):
    return np.random.default_rng(seed).random(shape)


def test_psnr_trivial_cases():
    a = rand((16, 16), 0)
    assert psnr(a, a) == PSNR_CAP == 100.0
    assert psnr(np.zeros((8, 8)), np.ones((8, 8))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_matches_loop_oracle():
    a, b = rand((13, 17), 1), rand((13, 17), 2)
    assert psnr(a, b) == pytest.approx(psnr_loop(a, b), abs=1e-9)


def test_psnr_errors():
    with pytest.raises(StructuralError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 4)), shave=2)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(3)
    clean = rng.random((32, 32))
    noise = rng.standard_normal((32, 32))
    vals = [psnr(clean, clean + amp * noise) for amp in (0.01, 0.03, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_constant_images_closed_form():
    a = np.full((20, 20), 100 / 255)
    b = np.full((20, 20), 50 / 255)
    want = (2 * 5000 + 6.5025) / (12500 + 6.5025)
    # the quoted 0.80009 is the closed form to four decimals (it evaluates to 0.800104)
    assert want == pytest.approx(0.80009, abs=1e-4)
    assert ssim(a, b) == pytest.approx(want, abs=1e-9)


def test_ssim_identity_and_oracle():
    a, b = rand((14, 15), 4), rand((14, 15), 5)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim_loop(a * 255, b * 255), abs=1e-9)


def test_ssim_of_negative_is_negative():
    a = rand((24, 24), 6)
    assert ssim(a, 1.0 - a) < 0


def test_ssim_window_too_large():
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 12)), shave=1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(11, 24), w=st.integers(11, 24))
def test_symmetric_and_bounded(seed, h, w):
    a, b = rand((h, w), seed), rand((h, w), seed + 1)
    assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 < s <= 1


def test_shave_only_sees_border():
    a = rand((30, 30), 7)
    b = a.copy()
    b[:3, :] = 0
    b[:, -3:] = 1
    c = a + 0.05 * np.random.default_rng(8).standard_normal(a.shape)
    b2, c2 = c.copy(), c.copy()
    b2[:3, :] = 0
    assert psnr(b, a, shave=3) == PSNR_CAP
    assert psnr(b2, a, shave=3) == pytest.approx(psnr(c2, a, shave=3))
    assert ssim(b2, a, shave=3) == pytest.approx(ssim(c2, a, shave=3))


def test_rmse_cases():
    a = rand((9, 11), 9)
    assert rmse(a, a) == 0
    assert rmse(a + 0.25, a) == pytest.approx(0.25, abs=1e-12)
    b = rand((9, 11), 10)
    assert rmse(a, b) == pytest.approx(rmse_loop(a, b), abs=1e-6)
    with pytest.raises(StructuralError):
        rmse(a, b[:, :5])


def test_rmse_uses_native_units():
    a = ImageBuffer(np.full((4, 4), 1000 / 65535), "depth", 65535)
    b = ImageBuffer(np.full((4, 4), 1010 / 65535), "depth", 65535)
    # buffers hold float32, so the rescaled difference carries ~1e-5 units of rounding
    assert rmse(a, b) == pytest.approx(10.0, abs=1e-3)


def test_report_means_and_format():
    rep = MetricReport()
    rep.add(MetricRecord("a", psnr=30.0, ssim=0.9))
    rep.add(MetricRecord("b", psnr=32.0, ssim=0.8))
    assert rep.mean("psnr") == 31.0 and rep.mean("ssim") == pytest.approx(0.85)
    assert rep.mean("rmse") is None
    text = rep.format({"method": "bicubic"})
    lines = text.splitlines()
    assert lines[0] == "image\tpsnr\tssim"
    assert lines[1] == "a\t30.0000\t0.9000"
    assert lines[3] == "MEAN\t31.0000\t0.8500"
    assert "method=bicubic" in lines and "images=2" in lines and "mean-psnr=31.000000" in lines
