import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from stdrgs.estimator import DynamicSplatModel
from stdrgs.exceptions import InvalidInputError
from stdrgs.validation import check_image, check_points, check_timestamp

SMALL = dict(hidden_width=8, zs_dim=4, zt_dim=4, deform_layers=3, knn_k=3, kl_samples=6, checkpoint_every=0)


def model(**kw):
    return DynamicSplatModel(iterations=6, warm_up_end=2, reg_end=4, config=SMALL, **kw)


def test_params_and_clone():
    m = model(lambda_temp=0.3)
    c = clone(m)
    assert c.get_params() == m.get_params()
    assert c.set_params(seed=4).seed == 4


def test_fit_predict_transform_score(tiny_dataset):
    m = model().fit(tiny_dataset)
    assert m.n_gaussians_ == len(tiny_dataset.init_points) and m.K_ == tiny_dataset.K
    imgs = m.predict([(tiny_dataset.cameras[0], 0), (tiny_dataset.cameras[1], 2)])
    assert imgs.shape == (2, 16, 16, 3) and np.all(np.isfinite(imgs))
    probs = m.transform()
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-12)
    assert np.isfinite(m.score(tiny_dataset))
    with pytest.raises(InvalidInputError):
        m.predict([(tiny_dataset.cameras[0], 3)])


def test_fit_is_reproducible(tiny_dataset):
    a = model().fit(tiny_dataset).predict([(tiny_dataset.cameras[2], 1)])
    b = model().fit(tiny_dataset).predict([(tiny_dataset.cameras[2], 1)])
    assert np.array_equal(a, b)


def test_unfitted_and_bad_input():
    with pytest.raises(NotFittedError):
        model().transform()
    with pytest.raises(InvalidInputError):
        model().fit(np.zeros((3, 3)))


def test_validation_helpers():
    assert check_points([[0, 0, 0]]).shape == (1, 3)
    for bad in (np.zeros((0, 3)), np.zeros((2, 2)), [[np.nan, 0, 0]]):
        with pytest.raises(InvalidInputError):
            check_points(bad)
    with pytest.raises(InvalidInputError):
        check_points([[0, 0, 0]], [[2, 0, 0]])
    assert check_image(np.zeros((4, 5, 3)), 4, 5).shape == (4, 5, 3)
    with pytest.raises(InvalidInputError):
        check_image(np.zeros((4, 5, 3)), 5, 4)
    assert check_timestamp(np.int64(2), 3) == 2
    for bad in (3, -1, 1.5, True):
        with pytest.raises(InvalidInputError):
            check_timestamp(bad, 3)
