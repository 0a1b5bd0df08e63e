import numpy as np
import pytest

from vrvc.errors import DimensionError, EvaluationError
from vrvc.metrics import RdPoint, bd_rate, psnr, psnr_capped, rd_csv, ssim


# -- psnr -----------------------------------------------------------------------


def test_psnr_identical_images(rng):
    img = rng.uniform(0, 1, size=(16, 16, 3))
    assert psnr(img, img) == np.inf
    assert psnr_capped(img, img) == 99.0


def test_psnr_known_mse():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)  # MSE = 0.01, peak 1 -> 20 dB
    assert abs(psnr(a, b, peak=1.0) - 20.0) < 1e-12


def test_psnr_8bit_unit_mse():
    a = np.zeros((16, 16))
    b = np.ones((16, 16))  # MSE = 1 at peak 255
    assert abs(psnr(a, b, peak=255.0) - 48.130803608679231) < 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_decreases_with_noise(rng):
    img = rng.uniform(0.2, 0.8, size=(32, 32, 3))
    values = []
    for scale in (0.01, 0.03, 0.1):
        noisy = img + rng.normal(scale=scale, size=img.shape)
        values.append(psnr(img, noisy))
    assert values[0] > values[1] > values[2]


# -- ssim -----------------------------------------------------------------------


def test_ssim_identical(rng):
    img = rng.uniform(0, 1, size=(24, 24, 3))
    assert abs(ssim(img, img) - 1.0) < 1e-12
    assert abs(ssim(img, img * 1.0) - 1.0) < 1e-12


def test_ssim_symmetric(rng):
    a = rng.uniform(0, 1, size=(20, 20, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_constant_offset_closed_form():
    # zero-variance patches: SSIM = (2 mu_a mu_b + c1) / (mu_a^2 + mu_b^2 + c1)
    a = np.full((16, 16), 0.4)
    b = np.full((16, 16), 0.5)
    c1 = 0.01**2
    expected = (2 * 0.4 * 0.5 + c1) / (0.4**2 + 0.5**2 + c1)
    assert abs(ssim(a, b) - expected) < 1e-10


def test_ssim_window_size_guard():
    with pytest.raises(DimensionError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# -- bd_rate ---------------------------------------------------------------------


REF = [(100.0, 30.0), (200.0, 33.0), (400.0, 35.0), (800.0, 38.0)]


def test_bd_identical_curves():
    assert abs(bd_rate(REF, list(REF))) < 1e-12


def test_bd_doubled_rates():
    doubled = [(2 * r, q) for r, q in REF]
    assert abs(bd_rate(REF, doubled) - 100.0) < 0.5


def test_bd_halved_rates():
    halved = [(0.5 * r, q) for r, q in REF]
    assert abs(bd_rate(REF, halved) - (-50.0)) < 0.25


def test_bd_hand_computed_example():
    # frozen via exact Lagrange interpolation + symbolic integration over [30.5, 37.8]
    test = [(90.0, 30.5), (160.0, 33.2), (350.0, 35.5), (700.0, 37.8)]
    assert abs(bd_rate(REF, test) - (-22.32460815069716)) < 1e-9


def test_bd_reorder_invariant(rng):
    test = [(90.0, 30.5), (160.0, 33.2), (350.0, 35.5), (700.0, 37.8)]
    base = bd_rate(REF, test)
    for _ in range(5):
        perm_r = [REF[i] for i in rng.permutation(4)]
        perm_t = [test[i] for i in rng.permutation(4)]
        assert abs(bd_rate(perm_r, perm_t) - base) < 1e-9


def test_bd_antisymmetry_algebra():
    test = [(90.0, 30.5), (160.0, 33.2), (350.0, 35.5), (700.0, 37.8)]
    ab = bd_rate(REF, test)
    ba = bd_rate(test, REF)
    # offset algebra: bd(A,B) ~= -bd(B,A) / (1 + bd(B,A)) for smooth curves
    predicted = -(ba / 100.0) / (1.0 + ba / 100.0) * 100.0
    assert abs(ab - predicted) / max(abs(ab), 1.0) < 0.005


def test_bd_requires_four_points():
    with pytest.raises(EvaluationError):
        bd_rate(REF[:3], REF)


def test_bd_requires_overlap():
    shifted = [(r, q + 50) for r, q in REF]
    with pytest.raises(EvaluationError):
        bd_rate(REF, shifted)


# -- csv -------------------------------------------------------------------------


def test_rd_csv_schema():
    pts = [
        RdPoint(12.5, 31.0, 0.95, 0, "train"),
        RdPoint(12.5, 29.0, 0.93, 0, "test"),
        RdPoint(40.0, 34.0, 0.97, 1, "train"),
        RdPoint(40.0, 31.5, 0.95, 1, "test"),
    ]
    text = rd_csv("rotating-sphere", pts, [0.0018, 0.18])
    lines = text.strip().split("\n")
    assert lines[0] == "scene,split,rate_index,lambda,kb_per_frame,psnr_db,ssim"
    assert len(lines) == 5
    assert lines[1].startswith("rotating-sphere,test,0,0.0018,")
