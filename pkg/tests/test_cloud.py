import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import softmax_reference
from stdrgs.cloud import GaussianCloud, build_knn, init_cloud, mask_distribution, modulated_opacity
from stdrgs.exceptions import InvalidInputError


def cloud_with_masks(mask, opacity=None):
    n = mask.shape[0]
    c = init_cloud(np.arange(3 * n, dtype=float).reshape(n, 3), np.full((n, 3), 0.5), mask.shape[1])
    c.mask[:] = mask
    if opacity is not None:
        c.opacity[:] = opacity
    return c


def test_single_point_init():
    c = init_cloud([[0.0, 0.0, 0.0]], [[0.2, 0.4, 0.6]], 4)
    assert np.array_equal(c.mask, np.zeros((1, 4)))
    np.testing.assert_allclose(1 / (1 + np.exp(-c.opacity)), 0.1)
    assert np.array_equal(c.rotation, [[1.0, 0, 0, 0]])


def test_two_points_scale():
    c = init_cloud([[0, 0, 0], [2.0, 0, 0]], [[0.5] * 3] * 2, 3)
    np.testing.assert_allclose(c.log_scale, np.log(2.0))


def test_init_scale_matches_brute_force_neighbours():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 3))
    c = init_cloud(pts, rng.uniform(size=(30, 3)), 4)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.diag(np.full(30, np.inf))
    expected = np.log(np.sort(d, axis=1)[:, :3].mean(axis=1))
    np.testing.assert_allclose(c.log_scale[:, 0], expected, rtol=1e-13)


def test_init_is_deterministic():
    rng = np.random.default_rng(1)
    pts, cols = rng.normal(size=(20, 3)), rng.uniform(size=(20, 3))
    a, b = init_cloud(pts, cols, 5, seed=3), init_cloud(pts, cols, 5, seed=3)
    for name, arr in a.params().items():
        assert np.array_equal(arr, getattr(b, name))


def test_init_errors():
    with pytest.raises(InvalidInputError):
        init_cloud(np.zeros((0, 3)), np.zeros((0, 3)), 4)
    with pytest.raises(InvalidInputError):
        init_cloud([[0.0, 0, 0]], [[0.5] * 3], 1)


def test_grads_mirror_params():
    c = init_cloud(np.eye(3), np.full((3, 3), 0.5), 4)
    assert all(c.grads[k].shape == v.shape for k, v in c.params().items())
    assert isinstance(c.copy(), GaussianCloud)


def test_mask_distribution_examples():
    np.testing.assert_allclose(mask_distribution(cloud_with_masks(np.zeros((1, 4)))), [[0.25] * 4])
    np.testing.assert_allclose(mask_distribution(cloud_with_masks(np.array([[np.log(2), 0.0]]))), [[2 / 3, 1 / 3]],
                               rtol=1e-15)
    p = mask_distribution(cloud_with_masks(np.array([[1000.0, 0.0]])))
    assert np.all(np.isfinite(p)) and p[0, 0] == 1.0


@given(arrays(np.float64, (5, 6), elements=st.floats(-30, 30)))
def test_mask_distribution_matches_high_precision(m):
    p = mask_distribution(cloud_with_masks(m))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    ref = np.array([[float(v) for v in softmax_reference(row)] for row in m])
    np.testing.assert_allclose(p, ref, atol=1e-12)


def test_modulated_opacity_examples():
    c = cloud_with_masks(np.array([[0.0, 1e3, -1e3]]), opacity=[0.0])
    np.testing.assert_allclose(modulated_opacity(c, 0), [0.25])
    np.testing.assert_allclose(modulated_opacity(c, 1), [0.5])
    assert modulated_opacity(c, 2)[0] < 1e-300
    with pytest.raises(IndexError):
        modulated_opacity(c, 3)


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.01, 5))
def test_modulated_opacity_monotone(m, o, d):
    lo = modulated_opacity(cloud_with_masks(np.array([[m, 0.0]]), [o]), 0)[0]
    assert modulated_opacity(cloud_with_masks(np.array([[m + d, 0.0]]), [o]), 0)[0] >= lo
    assert modulated_opacity(cloud_with_masks(np.array([[m, 0.0]]), [o + d]), 0)[0] >= lo


def test_knn_examples():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [10, 0, 0]])
    assert build_knn(pts, 1)[:, 0].tolist() == [1, 0, 1]
    dup = np.array([[0.0, 0, 0], [1, 0, 0], [1, 0, 0], [1, 0, 0]])
    assert build_knn(dup, 1)[0, 0] == 1
    six = np.random.default_rng(0).normal(size=(6, 3))
    table = build_knn(six, 5)
    for i, row in enumerate(table):
        assert sorted(row) == [j for j in range(6) if j != i]
    with pytest.raises(InvalidInputError):
        build_knn(six, 6)


@given(st.integers(7, 60), st.integers(1, 6), st.integers(0, 1000))
def test_knn_matches_exhaustive_search(n, k, seed):
    pts = np.random.default_rng(seed).integers(-3, 4, (n, 3)).astype(np.float64)  # exact ties
    table = build_knn(pts, k)
    for i in range(n):
        d = [(np.sum((pts[i] - pts[j]) ** 2), j) for j in range(n) if j != i]
        assert table[i].tolist() == [j for _, j in sorted(d)[:k]]
