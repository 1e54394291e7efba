import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, naive_render, rel_err
from stdrgs.exceptions import ContractError
from stdrgs.geometry import Splat2D
from stdrgs.splat import RasterSettings, depth_sort, render_backward, render_forward


def random_splats(seed, n, size):
    rng = np.random.default_rng(seed)
    means = rng.uniform(-2, size + 2, (n, 2))
    a = rng.normal(0, 1, (n, 2, 2)) * rng.uniform(0.5, 3.0, (n, 1, 1))
    cov = a @ a.transpose(0, 2, 1) + 0.3 * np.eye(2)
    depth = rng.uniform(0.5, 5, n)
    visible = rng.uniform(0, 1, n) > 0.05
    colors = rng.uniform(0, 1, (n, 3))
    alphas = rng.uniform(0.05, 0.99, n)
    return Splat2D(means, cov, depth, visible), colors, alphas


def test_empty_scene():
    sp = Splat2D(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0, bool))
    out = render_forward(sp, np.zeros((0, 3)), np.zeros(0), 8, 8)
    assert not np.any(out.image)
    assert np.all(out.final_transmittance == 1.0)


def test_saturated_splat_gives_its_colour():
    sp = Splat2D(np.array([[4.0, 4.0]]), np.array([np.eye(2) * 1e6]), np.array([1.0]), np.array([True]))
    out = render_forward(sp, np.array([[0.2, 0.6, 0.9]]), np.array([0.999]), 8, 8, settings=RasterSettings.exact())
    np.testing.assert_allclose(out.image[4, 4], [0.2, 0.6, 0.9], atol=1e-2)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("exact", [True, False])
def test_tiles_match_naive_oracle(seed, exact):
    settings = RasterSettings.exact() if exact else RasterSettings()
    sp, colors, alphas = random_splats(seed, 40, 32)
    bg = [0.1, 0.2, 0.3]
    out = render_forward(sp, colors, alphas, 32, 32, bg, settings)
    ref, trans = naive_render(sp.mean2d, sp.cov2d, sp.depth, colors, alphas, sp.visible, 32, 32, bg,
                              settings.alpha_min, settings.t_min)
    assert np.abs(out.image - ref).max() <= 1e-10
    assert np.abs(out.final_transmittance - trans).max() <= 1e-10


def test_energy_conservation():
    sp, colors, alphas = random_splats(1, 30, 32)
    out = render_forward(sp, np.ones_like(colors), alphas, 32, 32, [0, 0, 0], RasterSettings.exact())
    # with white splats on a black background the image is the accumulated alpha
    np.testing.assert_allclose(out.image[..., 0] + out.final_transmittance, 1.0, atol=1e-12)
    assert np.all(out.final_transmittance >= 0) and np.all(out.final_transmittance <= 1)


def test_rendering_is_deterministic():
    sp, colors, alphas = random_splats(2, 50, 32)
    a = render_forward(sp, colors, alphas, 32, 32).image
    b = render_forward(sp, colors, alphas, 32, 32).image
    assert np.array_equal(a, b)


def test_depth_sort():
    assert list(depth_sort([3.0, 1.0, 2.0])) == [1, 2, 0]
    assert list(depth_sort([1.0, 1.0, 1.0])) == [0, 1, 2]


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=1000))
def test_depth_sort_is_stable_reference_sort(depths):
    assert list(depth_sort(depths)) == sorted(range(len(depths)), key=lambda i: (depths[i], i))


def _check_backward(sp, colors, alphas, size, seed):
    settings = RasterSettings.exact()
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 1, (size, size, 3))

    def loss():
        return float(np.sum(render_forward(sp, colors, alphas, size, size, [0.1, 0.0, 0.2], settings).image * w))

    out = render_forward(sp, colors, alphas, size, size, [0.1, 0.0, 0.2], settings)
    g = render_backward(out.context, w)
    for analytic, arr in ((g.mean2d, sp.mean2d), (g.color, colors), (g.alpha, alphas)):
        assert rel_err(analytic, central_difference(loss, arr)).max() <= 1e-4
    # covariances are symmetric: perturb (a, b, c) of [[a, b], [b, c]] together
    abc = np.stack([sp.cov2d[:, 0, 0], sp.cov2d[:, 0, 1], sp.cov2d[:, 1, 1]], axis=1)

    def sym_loss():
        sp.cov2d[:, 0, 0], sp.cov2d[:, 1, 1] = abc[:, 0], abc[:, 2]
        sp.cov2d[:, 0, 1] = sp.cov2d[:, 1, 0] = abc[:, 1]
        return loss()

    numeric = central_difference(sym_loss, abc)
    analytic = np.stack([g.cov2d[:, 0, 0], g.cov2d[:, 0, 1] + g.cov2d[:, 1, 0], g.cov2d[:, 1, 1]], axis=1)
    assert rel_err(analytic, numeric).max() <= 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_backward_matches_finite_differences(seed):
    sp, colors, alphas = random_splats(seed + 10, 12, 16)
    _check_backward(sp, colors, alphas, 16, seed)


def test_two_stacked_splats_occlusion_gradient():
    sp = Splat2D(np.array([[8.0, 8.0], [8.5, 7.5]]), np.array([np.eye(2) * 9, np.eye(2) * 12]),
                 np.array([1.0, 2.0]), np.array([True, True]))
    _check_backward(sp, np.array([[0.9, 0.1, 0.1], [0.1, 0.8, 0.3]]), np.array([0.7, 0.6]), 16, 0)


def test_zero_upstream_and_shape_contract():
    sp, colors, alphas = random_splats(3, 10, 16)
    out = render_forward(sp, colors, alphas, 16, 16)
    g = render_backward(out.context, np.zeros((16, 16, 3)))
    assert not any(np.any(a) for a in (g.mean2d, g.cov2d, g.color, g.alpha))
    with pytest.raises(ContractError):
        render_backward(out.context, np.zeros((8, 8, 3)))


def test_invisible_and_singular_splats_get_zero_gradient():
    sp, colors, alphas = random_splats(4, 10, 16)
    sp.visible[0] = False
    sp.cov2d[1] = np.zeros((2, 2))
    out = render_forward(sp, colors, alphas, 16, 16)
    g = render_backward(out.context, np.ones((16, 16, 3)))
    assert not np.any(g.alpha[:2]) and not np.any(g.mean2d[:2])
