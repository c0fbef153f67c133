import numpy as np
import pytest
from sklearn.base import clone

from modmed.data import synth_shapes_dataset
from modmed.estimators import ReconstructionEstimator, SegmentationEstimator, check_images, check_labels


@pytest.fixture(scope="module")
def shapes():
    return synth_shapes_dataset(4, (16, 16), seed=0)


def test_clone_and_params():
    est = SegmentationEstimator(num_classes=2, channels=4, epochs=3)
    c = clone(est)
    assert c.get_params() == est.get_params()
    assert c is not est
    r = clone(ReconstructionEstimator(variational=True, kl_weight=1e-3))
    assert r.get_params()["variational"] is True


def test_check_images_and_labels():
    X = check_images(np.zeros((2, 1, 8, 8), dtype=np.uint8))
    assert X.shape == (2, 8, 8) and X.dtype == np.float32
    with pytest.raises(ValueError, match="spatial"):
        check_images(np.zeros((8, 8)))
    with pytest.raises(ValueError, match="NaN"):
        check_images(np.full((1, 4, 4), np.nan))
    with pytest.raises(ValueError, match="rank-3"):
        check_images(np.zeros((1, 4, 4)), rank=3)
    with pytest.raises(ValueError, match="match"):
        check_labels(np.zeros((1, 4, 5)), X[:1, :4, :4])
    with pytest.raises(ValueError, match="integer"):
        check_labels(np.full((2, 8, 8), 0.5), X)
    with pytest.raises(ValueError, match=r"\[0, 2\)"):
        check_labels(np.full((2, 8, 8), 2), X, 2)


def test_segmentation_estimator(shapes):
    X, y = shapes
    est = SegmentationEstimator(channels=4, num_down=1, epochs=40, lr=3e-3, batch_size=2).fit(X, y)
    assert list(est.classes_) == [0, 1]
    proba = est.predict_proba(X)
    assert proba.shape == (4, 2, 16, 16)
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-5)
    assert est.predict(X).shape == (4, 16, 16)
    assert est.score(X, y) > 0.5
    with pytest.raises(ValueError, match="rank"):
        est.predict(np.zeros((1, 8, 8, 8)))


def test_unfitted_estimator_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        SegmentationEstimator().predict(np.zeros((1, 8, 8)))


def test_reconstruction_estimator(shapes):
    X, _ = shapes
    est = ReconstructionEstimator(channels=4, num_down=1, epochs=30, lr=3e-3, batch_size=1).fit(X)
    assert est.transform(X).shape == X.shape
    assert est.score(X) > 15
    noisy = np.clip(X + 0.05, 0, 1)
    sup = ReconstructionEstimator(channels=4, num_down=1, epochs=2).fit(noisy, X)
    assert np.isfinite(sup.score(noisy, X))
    vae = ReconstructionEstimator(variational=True, channels=4, num_down=1, epochs=2).fit(X)
    assert vae.predict(X).shape == X.shape
    with pytest.raises(ValueError, match="hierarchical"):
        ReconstructionEstimator(variational=True, hierarchical=True, epochs=1).fit(X)
