import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, rel_err, ssim_reference
from stdrgs.exceptions import InvalidInputError
from stdrgs.metrics import dssim_loss, l1_loss, psnr, ssim


def images(seed, shape=(16, 13, 3)):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)


def test_l1_examples():
    a = np.zeros((2, 2, 3))
    assert l1_loss(a, a)[0] == 0.0 and not np.any(l1_loss(a, a)[1])
    loss, g = l1_loss(np.full((2, 2, 3), 0.5), a)
    assert loss == 0.5
    np.testing.assert_allclose(g, 1 / 12)


def test_identical_images():
    x, _ = images(0)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert dssim_loss(x, x)[0] == pytest.approx(0.0, abs=1e-12)
    assert psnr(x, x) == float("inf")


def test_psnr_example():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)


def test_shape_mismatch_and_small_images():
    with pytest.raises(InvalidInputError):
        l1_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(InvalidInputError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(11, 20), st.integers(11, 20))
def test_ssim_matches_direct_window_sum(seed, h, w):
    x, y = images(seed, (h, w, 3))
    y = np.clip(0.6 * x + 0.4 * y, 0, 1)
    assert abs(ssim(x, y) - ssim_reference(x, y)) <= 1e-9


@given(st.integers(0, 10**6))
@settings(max_examples=20, deadline=None)
def test_ssim_symmetric_and_bounded(seed):
    x, y = images(seed)
    s = ssim(x, y)
    assert -1 <= s <= 1
    assert abs(s - ssim(y, x)) <= 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_dssim_gradient(seed):
    x, y = images(seed, (12, 14, 3))
    _, g = dssim_loss(x, y)
    assert rel_err(g, central_difference(lambda: dssim_loss(x, y)[0], x)).max() <= 1e-4


def test_l1_gradient_away_from_ties():
    x, y = images(7, (5, 5, 3))
    _, g = l1_loss(x, y)
    assert rel_err(g, central_difference(lambda: l1_loss(x, y)[0], x)).max() <= 1e-6
