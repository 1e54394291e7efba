import numpy as np
import pytest

from oracles import central_difference, rel_err
from stdrgs.cloud import init_cloud
from stdrgs.deform import DeformationOutput, DeformField, apply_deformation, normalized_time
from stdrgs.exceptions import InvalidInputError, InvalidParameterError


def field(**kw):
    return DeformField(np.random.default_rng(0), hidden=8, n_layers=4, **kw)


def test_initial_field_is_identity():
    f = field(zs_dim=3, zt_dim=2)
    n = 5
    out, _ = f.forward(np.zeros((n, 3)), 0.5, np.ones((n, 3)), np.ones((n, 2)), np.full(n, 0.7))
    assert not any(np.any(getattr(out, k)) for k in ("dx", "dr", "ds", "dc", "dalpha"))


def test_time_range_checked():
    with pytest.raises(InvalidInputError):
        field(zs_dim=0, zt_dim=0).forward(np.zeros((2, 3)), 1.5)
    assert normalized_time(0, 8) == 0.0 and normalized_time(7, 8) == 1.0


def test_apply_deformation_is_functional():
    c = init_cloud(np.eye(3), np.full((3, 3), 0.5), 4)
    before = {k: v.copy() for k, v in c.params().items()}
    d = DeformationOutput(np.ones((3, 3)), np.zeros((3, 4)), np.full((3, 3), 0.1), np.zeros((3, 3)), np.zeros(3))
    out = apply_deformation(c, d)
    np.testing.assert_allclose(out.position, np.eye(3) + 1)
    np.testing.assert_allclose(out.log_scale, c.log_scale + 0.1)
    assert all(np.array_equal(before[k], v) for k, v in c.params().items())
    bad = DeformationOutput(np.zeros((3, 3)), -c.rotation, np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(InvalidParameterError):
        apply_deformation(c, bad)


@pytest.mark.parametrize("gate", [True, False])
@pytest.mark.parametrize("extras", [False, True])
def test_deform_gradient(gate, extras):
    rng = np.random.default_rng(5)
    f = field(zs_dim=3, zt_dim=2, gate_by_pdyn=gate, deform_color=extras, deform_opacity=extras)
    for k in f.net.params:
        f.net.params[k] += rng.normal(0, 0.3, f.net.params[k].shape)
    n = 6
    x, zs, zt = rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=(n, 2))
    pd = rng.uniform(0.1, 0.9, n)
    t = np.array([0.37])
    w = {k: rng.normal(size=s) for k, s in (("dx", (n, 3)), ("dr", (n, 4)), ("ds", (n, 3)), ("dc", (n, 3)),
                                            ("dalpha", (n,)))}

    def loss():
        out, _ = f.forward(x, float(t[0]), zs, zt, pd)
        return float(sum(np.sum(getattr(out, k) * v) for k, v in w.items()))

    _, ctx = f.forward(x, float(t[0]), zs, zt, pd)
    grads, gx, gzs, gzt, gpd, gt = f.backward(ctx, DeformationOutput(**w))
    checks = [(gx, x), (gzs, zs), (gzt, zt), (np.array([gt]), t)]
    if gate:
        checks.append((gpd, pd))
    for analytic, arr in checks:
        assert rel_err(analytic, central_difference(loss, arr)).max() <= 1e-4
    for k, arr in f.net.params.items():
        assert rel_err(grads[k], central_difference(loss, arr)).max() <= 1e-4, k
