import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from robustlens.attributions import expected_gradients, integrated_gradients
from robustlens.data import generate_synthetic
from robustlens.estimators import (ClassConditionalMVN, ExpectedGradientsExplainer, IntegratedGradientsExplainer,
                                   ResNetClassifier)
from robustlens.exceptions import DimensionError
from robustlens.models import predict_logits, predict_representation


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(3, 16, size=8, seed=21)


@pytest.fixture(scope="module")
def fitted(small_data):
    labels = np.array(["a", "b", "c"])[small_data.labels]
    clf = ResNetClassifier(widths=(4, 8), blocks=(1, 1), epochs=2, batch_size=16, lr=0.1, random_state=3)
    return clf.fit(small_data.images, labels), labels


def test_clone_and_params_round_trip():
    clf = ResNetClassifier(widths=(4,), blocks=(1,), epochs=3, adversarial=True)
    params = clf.get_params()
    assert params["epochs"] == 3 and params["adversarial"] is True
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf
    twin.set_params(lr=0.3)
    assert twin.lr == 0.3 and clf.lr == 0.05


def test_unfitted_classifier_raises():
    with pytest.raises(NotFittedError):
        ResNetClassifier().predict(np.zeros((1, 3, 8, 8)))


def test_fit_predict_contract(fitted, small_data):
    clf, labels = fitted
    assert clf.classes_.tolist() == ["a", "b", "c"]
    assert clf.n_features_in_ == 3 * 8 * 8
    assert len(clf.history_) == 2 and 1 <= clf.best_epoch_ <= 2
    proba = clf.predict_proba(small_data.images)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    pred = clf.predict(small_data.images)
    assert set(pred) <= {"a", "b", "c"}
    np.testing.assert_array_equal(pred, clf.classes_[proba.argmax(1)])
    assert 0.0 <= clf.score(small_data.images, labels) <= 1.0
    np.testing.assert_array_equal(clf.decision_function(small_data.images),
                                  predict_logits(clf.params_, small_data.images))
    assert clf.transform(small_data.images[:2]).shape == (2, 8)


def test_fit_is_seeded(small_data, fitted):
    clf, labels = fitted
    again = clone(clf).fit(small_data.images, labels)
    assert again.params_.equals(clf.params_)


def test_wrong_image_shape_rejected(fitted):
    clf, _ = fitted
    with pytest.raises(DimensionError):
        clf.predict(np.zeros((2, 3, 9, 9), np.float32))
    with pytest.raises(ValueError):
        clf.predict(np.full((1, 3, 8, 8), np.nan, np.float32))


def test_robust_score_is_fraction(fitted, small_data):
    clf, labels = fitted
    value = clf.robust_score(small_data.images[:16], labels[:16])
    assert 0.0 <= value <= clf.score(small_data.images[:16], labels[:16]) + 0.25


def test_from_params_wraps_store(trained_tiny):
    params, data = trained_tiny
    clf = ResNetClassifier.from_params(params)
    np.testing.assert_array_equal(clf.transform(data.images[:3]), predict_representation(params, data.images[:3]))
    assert clf.classes_.tolist() == [0, 1, 2, 3]


def test_ig_explainer_matches_function(tiny_params, rng):
    x = rng.uniform(size=(2, 3, 8, 8))
    ex = IntegratedGradientsExplainer(tiny_params, steps=8, target=1).fit()
    maps = ex.transform(x)
    assert maps.shape == x.shape
    direct = integrated_gradients(tiny_params, x[1].astype(np.float64), target=1, steps=8)
    np.testing.assert_allclose(maps[1], direct.values, atol=1e-12)
    labelled = IntegratedGradientsExplainer(tiny_params, steps=4, target="label").transform(x, [0, 2])
    assert labelled.shape == x.shape
    with pytest.raises(ValueError):
        IntegratedGradientsExplainer(tiny_params, target="label").transform(x)
    assert clone(ex).get_params()["steps"] == 8


def test_ig_explainer_noise_baseline_is_seeded(tiny_params, rng):
    x = rng.uniform(size=(1, 3, 8, 8))
    ex = IntegratedGradientsExplainer(tiny_params, steps=4, baseline="uniform_noise", random_state=5)
    assert ex.transform(x).tobytes() == ex.transform(x).tobytes()


def test_eg_explainer(tiny_params, rng):
    bg = rng.uniform(size=(6, 3, 8, 8))
    x = rng.uniform(size=(2, 3, 8, 8))
    ex = ExpectedGradientsExplainer(tiny_params, samples=16, target=0, random_state=2).fit(bg)
    maps = ex.transform(x)
    direct = expected_gradients(tiny_params, x[1], bg, 16, 0, seed=3)
    np.testing.assert_allclose(maps[1], direct.values, atol=1e-12)
    with pytest.raises(NotFittedError):
        ExpectedGradientsExplainer(tiny_params).explain(x[0])


def test_class_conditional_mvn(rng):
    X = rng.uniform(size=(12, 3, 2, 2))
    y = np.repeat([0, 1], 6)
    mvn = ClassConditionalMVN().fit(X, y)
    draws = mvn.sample(1, n=4, random_state=7)
    assert draws.shape == (4, 3, 2, 2) and draws.dtype == np.float32
    assert draws.min() >= 0 and draws.max() <= 1
    assert draws.tobytes() == mvn.sample(1, n=4, random_state=7).tobytes()
    np.testing.assert_allclose(mvn.stats_[0].mean, X[:6].reshape(6, -1).mean(axis=0))
    with pytest.raises(ValueError):
        mvn.sample(5)
