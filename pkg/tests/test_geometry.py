import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, rel_err, rotmat_reference
from stdrgs.exceptions import ContractError, InvalidInputError, InvalidParameterError
from stdrgs.geometry import (
    COV2D_BLUR,
    Camera,
    build_covariance,
    geometry_backward,
    project_gaussian,
    project_gaussians,
    quat_to_rotmat,
)

finite = st.floats(-3, 3, allow_nan=False)
quats = st.lists(finite, min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3)


def axis_camera(w=100, h=100, f=100.0):
    return Camera(width=w, height=h, fx=f, fy=f, cx=w / 2, cy=h / 2)


def test_identity_quaternion():
    assert np.array_equal(quat_to_rotmat([1, 0, 0, 0]), np.eye(3))


def test_half_turn_about_z():
    np.testing.assert_allclose(quat_to_rotmat([0, 0, 0, 1]), np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_degenerate_quaternion_rejected():
    with pytest.raises(InvalidParameterError):
        quat_to_rotmat([0, 0, 0, 1e-13])


@given(quats)
def test_rotation_matches_high_precision_reference(q):
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R, rotmat_reference(q), atol=1e-14)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12


@given(quats)
def test_double_cover(q):
    np.testing.assert_allclose(quat_to_rotmat(q), quat_to_rotmat(-np.asarray(q)), atol=1e-12)


def test_covariance_simple_cases():
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [0, 0, 0]), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [np.log(2), 0, 0]), np.diag([4.0, 1, 1]), atol=1e-14)


@given(quats, st.lists(st.floats(-2, 1), min_size=3, max_size=3))
def test_covariance_eigenvalues(q, ls):
    sigma = build_covariance(q, ls)
    assert np.abs(sigma - sigma.T).max() <= 1e-12
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(sigma)), np.sort(np.exp(2 * np.asarray(ls))),
                               rtol=1e-9, atol=1e-12)


def test_axis_point_projects_to_principal_point():
    sp = project_gaussian([0, 0, 1.0], np.eye(3) * 0.01, axis_camera())
    np.testing.assert_allclose(sp.mean2d, [50.0, 50.0])


def test_isotropic_on_axis_covariance():
    s2, z = 0.04, 2.0
    sp = project_gaussian([0, 0, z], np.eye(3) * s2, axis_camera())
    expected = (100.0**2 * s2 / z**2) * np.eye(2) + COV2D_BLUR * np.eye(2)
    np.testing.assert_allclose(sp.cov2d, expected, rtol=1e-12)


def test_behind_near_plane_is_culled():
    assert project_gaussian([0, 0, 0.0], np.eye(3), axis_camera()) is None
    sp, _ = project_gaussians(np.array([[0, 0, -1.0], [0, 0, 2.0]]), np.tile([1.0, 0, 0, 0], (2, 1)),
                              np.zeros((2, 3)), axis_camera())
    assert list(sp.visible) == [False, True]


def test_camera_validation():
    with pytest.raises(InvalidInputError):
        Camera(width=10, height=10, fx=-1, fy=1, cx=5, cy=5)
    with pytest.raises(InvalidInputError):
        Camera(width=10, height=10, fx=1, fy=1, cx=5, cy=5, rotation=np.diag([1.0, 1.0, -1.0]))


def test_camera_roundtrip():
    cam = Camera.look_at([3, 1, 2], [0, 0, 0], [0, 0, 1], 40, 30, 35.0)
    assert Camera.from_dict(cam.to_dict()).to_dict() == cam.to_dict()
    np.testing.assert_allclose(cam.center, [3, 1, 2], atol=1e-12)


@settings(max_examples=30)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_principal_point_equivariance(a, b):
    cam = Camera.look_at([2, -3, 1], [0, 0, 0], [0, 0, 1], 64, 64, 60.0)
    shifted = Camera(cam.width, cam.height, cam.fx, cam.fy, cam.cx + a, cam.cy + b, cam.rotation, cam.translation)
    x = np.array([0.3, -0.2, 0.1])
    sigma = build_covariance([0.9, 0.1, -0.3, 0.2], [-1.0, -1.5, -0.7])
    p0, p1 = project_gaussian(x, sigma, cam), project_gaussian(x, sigma, shifted)
    np.testing.assert_allclose(p1.mean2d - p0.mean2d, [a, b], atol=1e-9)
    np.testing.assert_array_equal(p1.cov2d, p0.cov2d)


def _random_projection(seed, n=4):
    rng = np.random.default_rng(seed)
    cam = Camera.look_at([0.5, -3.0, 1.0], [0, 0, 0], [0, 0, 1], 32, 32, 30.0)
    x = rng.normal(0, 0.5, (n, 3))
    q = rng.normal(0, 1, (n, 4))
    ls = rng.normal(-1.0, 0.3, (n, 3))
    gm = rng.normal(0, 1, (n, 2))
    gc = rng.normal(0, 1, (n, 2, 2))
    return cam, x, q, ls, gm, gc


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    cam, x, q, ls, gm, gc = _random_projection(seed)

    def loss():
        sp, _ = project_gaussians(x, q, ls, cam)
        return float(np.sum(sp.mean2d * gm) + np.sum(sp.cov2d * gc))

    _, ctx = project_gaussians(x, q, ls, cam)
    gx, gq, gls = geometry_backward(ctx, gm, gc)
    for analytic, arr in ((gx, x), (gq, q), (gls, ls)):
        assert rel_err(analytic, central_difference(loss, arr)).max() <= 1e-4


def test_zero_upstream_gives_zero_gradients():
    cam, x, q, ls, gm, gc = _random_projection(0)
    _, ctx = project_gaussians(x, q, ls, cam)
    for g in geometry_backward(ctx, np.zeros_like(gm), np.zeros_like(gc)):
        assert not np.any(g)


def test_backward_rejects_mismatched_context():
    cam, x, q, ls, gm, gc = _random_projection(0)
    _, ctx = project_gaussians(x, q, ls, cam)
    with pytest.raises(ContractError):
        geometry_backward(ctx, gm[:2], gc[:2])
