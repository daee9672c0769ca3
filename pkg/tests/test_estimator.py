"""Scikit-learn estimator surface: params, fit, predict, cloning."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from quatnet.errors import ShapeError
from quatnet.estimator import QCNNClassifier, validate_quaternion_images
from quatnet.qdata import synth_pattern
from quatnet.qtensor import unpack_channels


def task_arrays(seed=11, n=64, sigma=0.05, sample_seed=None):
    data = synth_pattern(seed, n, sigma, sample_seed=sample_seed)
    x = np.stack([unpack_channels(t) for t, _ in data.samples])
    y = np.array([lab for _, lab in data.samples])
    return x, y


class TestValidation:
    def test_accepts_valid_input(self, rng):
        x = rng.standard_normal((3, 4, 4, 8))
        out = validate_quaternion_images(x)
        assert out.shape == (3, 4, 4, 8)

    def test_rejects_wrong_rank(self, rng):
        with pytest.raises(ShapeError):
            validate_quaternion_images(rng.standard_normal((3, 4, 4)))

    def test_rejects_bad_channel_count(self, rng):
        with pytest.raises(ShapeError):
            validate_quaternion_images(rng.standard_normal((3, 4, 4, 6)))

    def test_rejects_nan(self, rng):
        x = rng.standard_normal((2, 2, 2, 4))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            validate_quaternion_images(x)


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        est = QCNNClassifier(epochs=3, learning_rate=0.1)
        params = est.get_params()
        assert params["epochs"] == 3
        est.set_params(epochs=5)
        assert est.epochs == 5

    def test_clone(self):
        est = QCNNClassifier(n_kernels=(3,), seed=7)
        dup = clone(est)
        assert dup.get_params() == est.get_params()

    def test_predict_before_fit_raises(self, rng):
        with pytest.raises(NotFittedError):
            QCNNClassifier().predict(rng.standard_normal((2, 8, 8, 4)))


class TestFitPredict:
    def test_learns_the_synthetic_task(self):
        x, y = task_arrays(n=160)
        est = QCNNClassifier(epochs=10, seed=0)
        est.fit(x, y)
        assert est.score(x, y) >= 0.95
        xh, yh = task_arrays(n=40, sample_seed=555)
        assert est.score(xh, yh) >= 0.9

    def test_classes_preserved_through_labels(self):
        x, y = task_arrays(n=32)
        shifted = y + 10  # arbitrary label values
        est = QCNNClassifier(epochs=4, seed=1)
        est.fit(x, shifted)
        assert set(est.classes_) == {10, 11, 12, 13}
        assert set(est.predict(x)) <= set(est.classes_)

    def test_predict_proba_rows_sum_to_one(self):
        x, y = task_arrays(n=32)
        est = QCNNClassifier(epochs=2, seed=2).fit(x, y)
        proba = est.predict_proba(x[:5])
        assert proba.shape == (5, 4)
        assert np.allclose(proba.sum(axis=1), 1.0)

    def test_deterministic_given_seed(self):
        x, y = task_arrays(n=32)
        a = QCNNClassifier(epochs=3, seed=3).fit(x, y)
        b = QCNNClassifier(epochs=3, seed=3).fit(x, y)
        assert a.loss_curve_ == b.loss_curve_
        assert np.array_equal(a.predict(x), b.predict(x))

    def test_equivariant_paradigm_with_rerelu(self):
        x, y = task_arrays(n=64)
        est = QCNNClassifier(paradigm="equivariant", activation="rerelu",
                             norm="rqbn", epochs=8, seed=4,
                             learning_rate=0.1)
        est.fit(x, y)
        assert est.score(x, y) >= 0.7

    def test_rejects_single_class(self):
        x, _ = task_arrays(n=8)
        with pytest.raises(ShapeError):
            QCNNClassifier(epochs=1).fit(x, np.zeros(8, dtype=int))

    def test_rejects_wrong_inference_shape(self, rng):
        x, y = task_arrays(n=16)
        est = QCNNClassifier(epochs=1, seed=0).fit(x, y)
        with pytest.raises(ShapeError):
            est.predict(rng.standard_normal((2, 4, 4, 4)))
