import numpy as np
import pytest
from sklearn.base import clone

from svgan.data import PhantomConfig, generate_phantoms
from svgan.errors import ShapeError, ValidationError
from svgan.estimator import AdversarialSegmenter, SelectiveClassWeighter


@pytest.fixture(scope="module")
def arrays():
    ds = generate_phantoms(PhantomConfig(num_patients=6, slices=4, height=16, width=16, seed=1))
    X = np.stack([r.volume for r in ds])
    labels = np.stack([r.labels for r in ds])
    diseases = np.array([r.disease for r in ds])
    return X, labels, diseases


def test_weighter_matches_hand_values():
    y = np.zeros((1, 10, 100), int)
    y[0, 9] = 1
    weighter = SelectiveClassWeighter(num_classes=2).fit(y)
    np.testing.assert_allclose(weighter.weights_, [0.74453, 2.21404], atol=1e-5)
    per_pixel = weighter.transform(y)
    assert per_pixel.shape == y.shape and per_pixel[0, 9, 0] == weighter.weights_[1]


def test_weighter_rejects_bad_labels():
    with pytest.raises(ValidationError):
        SelectiveClassWeighter(num_classes=2).fit(np.array([0, 2]))
    with pytest.raises(ValidationError):
        SelectiveClassWeighter().fit(np.array([0.5, 1.0]))


def test_segmenter_params_and_clone():
    est = AdversarialSegmenter(base_channels=4, max_epochs=1)
    params = est.get_params()
    assert params["base_channels"] == 4 and params["learning_rate"] == 1e-4
    assert clone(est).get_params() == params


def test_segmenter_fit_predict(arrays):
    X, labels, diseases = arrays
    est = AdversarialSegmenter(base_channels=4, disc_pixel_channels=4, max_epochs=1, batch_size=3, augment=False)
    est.fit(X, (labels, diseases))
    proba = est.predict_proba(X)
    assert proba.shape == (6, 4, 3, 16, 16)
    np.testing.assert_allclose(proba.sum(axis=2), 1.0, atol=1e-5)
    pred = est.predict(X)
    assert pred.shape == labels.shape and pred.max() < 3
    assert set(est.predict_disease(X)) <= {0, 1}
    assert 0.0 <= est.score(X, (labels, diseases)) <= 1.0
    again = clone(est).fit(X, (labels, diseases))
    np.testing.assert_array_equal(again.predict_proba(X), proba)


def test_segmenter_input_checks(arrays):
    X, labels, diseases = arrays
    est = AdversarialSegmenter(base_channels=4, max_epochs=1)
    with pytest.raises(ShapeError):
        est.fit(X[:, 0], (labels, diseases))
    bad = X.copy()
    bad[0, 0, 0, 0, 0] = np.inf
    with pytest.raises(ValidationError):
        est.fit(bad, (labels, diseases))
    with pytest.raises(Exception):
        est.predict(X)  # not fitted
