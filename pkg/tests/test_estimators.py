import numpy as np
import pytest
from sklearn.base import clone
from sklearn.cluster import KMeans
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from acai.estimators import AutoencoderEstimator, KMeansBestOf, LatentClassifier, PCAWhitening
from acai.lines import sample_batch
from acai.rng import Rng


@pytest.fixture(scope="module")
def fitted():
    x, _ = sample_batch(Rng(0), 32)
    return AutoencoderEstimator(variant="acai", total_samples=64, batch_size=16).fit(x), x


def test_autoencoder_round_trip_shapes(fitted):
    est, x = fitted
    z = est.transform(x)
    assert z.shape == (32, 64)
    np.testing.assert_array_equal(est.transform(x.reshape(32, -1)), z)
    assert est.inverse_transform(z).shape == x.shape
    assert len(est.loss_curve_) == 4 and est.n_features_in_ == 1024


def test_interpolation_endpoints(fitted):
    est, x = fitted
    path = est.interpolate(x[0], x[1], n_steps=5)
    assert path.shape == (5, 1, 32, 32) and path.min() >= 0 and path.max() <= 1
    np.testing.assert_allclose(path[0], np.clip(est.inverse_transform(est.transform(x[1:2])), 0, 1)[0], atol=1e-6)
    np.testing.assert_allclose(path[-1], np.clip(est.inverse_transform(est.transform(x[:1])), 0, 1)[0], atol=1e-6)


def test_autoencoder_params_and_errors():
    est = AutoencoderEstimator(variant="vae", arch="real32")
    assert clone(est).get_params()["variant"] == "vae"
    with pytest.raises(NotFittedError):
        est.transform(np.zeros((1, 1024)))
    with pytest.raises(ValueError):
        AutoencoderEstimator(total_samples=16, batch_size=16).fit(np.zeros((2, 28 * 28)))


def test_whitening_matches_sklearn_pca_whiten():
    from sklearn.decomposition import PCA

    rng = Rng(1)
    x = rng.normal((500, 4), dtype=np.float64) @ rng.normal((4, 4), dtype=np.float64)
    ours = PCAWhitening().fit_transform(x)
    theirs = PCA(whiten=True).fit_transform(x) * np.sqrt(500 / 499)  # sklearn normalises by n-1, we by n
    np.testing.assert_allclose(np.abs(ours), np.abs(theirs), atol=1e-6)
    np.testing.assert_allclose(PCAWhitening().fit(x).inverse_transform(ours), x, atol=1e-8)


def test_kmeans_matches_sklearn_objective():
    rng = Rng(2)
    centers = 10 * rng.normal((4, 3), dtype=np.float64)
    x = np.vstack([c + rng.normal((50, 3), dtype=np.float64) for c in centers])
    ours = KMeansBestOf(n_clusters=4, n_restarts=8).fit(x)
    theirs = KMeans(n_clusters=4, n_init=8, random_state=0).fit(x)
    assert ours.inertia_ == pytest.approx(theirs.inertia_, rel=1e-9)
    labels = np.repeat(np.arange(4), 50)
    assert ours.score_labels(x, labels) == 1.0
    np.testing.assert_array_equal(ours.fit_predict(x), ours.labels_)


def test_latent_classifier_in_pipeline():
    rng = Rng(3)
    centers = 5.0 * rng.normal((3, 6), dtype=np.float64)
    y = np.array(["a", "b", "c"])[rng.integers(0, 3, 300)]
    codes = np.searchsorted(["a", "b", "c"], y)
    x = centers[codes] + 0.2 * rng.normal((300, 6), dtype=np.float64)
    pipe = make_pipeline(PCAWhitening(), LatentClassifier(n_steps=1500, learning_rate=1e-2))
    pipe.fit(x, y)
    assert pipe.score(x, y) == 1.0
    assert set(pipe.predict(x)) <= {"a", "b", "c"}
    with pytest.raises(ValueError):
        LatentClassifier().fit(x, np.zeros(300))
