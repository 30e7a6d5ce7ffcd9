"""scikit-learn style wrappers around the autoencoders and downstream tools."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .downstream import (clustering_accuracy, confusion_matrix, fit_classifier, kmeans, pca_unwhiten,
                         pca_whiten_apply, pca_whiten_fit, predict_clusters)
from .metrics import interpolation_alphas
from .models import ArchConfig, ModelVariant
from .rng import Rng
from .trainer import ArrayData, TrainConfig, train

IMAGE_SHAPE = (1, 32, 32)


def _images(X) -> np.ndarray:
    """Accept ``(n, 1024)`` or ``(n, 1, 32, 32)`` and return the latter."""
    X = check_array(np.asarray(X).reshape(len(X), -1), dtype=np.float32)
    if X.shape[1] != int(np.prod(IMAGE_SHAPE)):
        raise ValueError(f"expected 32x32 single-channel images, got {X.shape[1]} features")
    return X.reshape(len(X), *IMAGE_SHAPE)


class AutoencoderEstimator(TransformerMixin, BaseEstimator):
    """Train one of the autoencoder variants on an image array.

    ``transform`` gives latent codes, ``inverse_transform`` decodes them and
    ``interpolate`` walks the latent segment between two images.
    """

    def __init__(self, variant="acai", arch="lines64", total_samples=2 ** 14, batch_size=64,
                 learning_rate=1e-4, random_state=0):
        self.variant = variant
        self.arch = arch
        self.total_samples = total_samples
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y=None):
        images = _images(X)
        config = TrainConfig(variant=ModelVariant(self.variant), arch=ArchConfig.preset(self.arch),
                             total_samples=self.total_samples, batch_size=self.batch_size,
                             lr=self.learning_rate, seed=self.random_state)
        state = train(config, ArrayData(images))
        self.model_ = state.model
        self.loss_curve_ = np.asarray(state.history)
        self.n_features_in_ = images[0].size
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.encode(_images(X))

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return self.model_.decode(check_array(Z, dtype=np.float32))

    def interpolate(self, x1, x2, n_steps=16):
        """Decoded images from ``x2`` (first) to ``x1`` (last)."""
        check_is_fitted(self, "model_")
        z = self.transform(np.stack([np.asarray(x1).reshape(IMAGE_SHAPE), np.asarray(x2).reshape(IMAGE_SHAPE)]))
        a = interpolation_alphas(n_steps).astype(np.float32)[:, None]
        return np.clip(self.model_.decode(a * z[0] + (1 - a) * z[1]), 0.0, 1.0)


class PCAWhitening(TransformerMixin, BaseEstimator):
    """Rotate onto principal axes and rescale each to unit variance."""

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self.transform_ = pca_whiten_fit(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return pca_whiten_apply(self.transform_, check_array(X, dtype=np.float64))

    def inverse_transform(self, X):
        check_is_fitted(self, "transform_")
        return pca_unwhiten(self.transform_, check_array(X, dtype=np.float64))


class KMeansBestOf(ClusterMixin, BaseEstimator):
    """Lloyd's K-means, keeping the restart with the lowest objective."""

    def __init__(self, n_clusters=10, n_restarts=32, random_state=0):
        self.n_clusters = n_clusters
        self.n_restarts = n_restarts
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        res = kmeans(X, self.n_clusters, self.n_restarts, Rng(self.random_state))
        self.cluster_centers_ = res.centers
        self.labels_ = res.assignments
        self.inertia_ = res.objective
        self.best_restart_ = res.restart
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return predict_clusters(check_array(X, dtype=np.float64), self.cluster_centers_)

    def score_labels(self, X, y) -> float:
        """Accuracy under the best cluster-to-class matching."""
        y = np.asarray(y)
        return clustering_accuracy(confusion_matrix(self.predict(X), y, max(self.n_clusters, int(y.max()) + 1)))


class LatentClassifier(ClassifierMixin, BaseEstimator):
    """Softmax layer trained by Adam on fixed features."""

    def __init__(self, n_steps=2000, batch_size=64, learning_rate=1e-4, random_state=0):
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float32)
        self.classes_, codes = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.state_ = fit_classifier(X, codes, len(self.classes_), steps=self.n_steps,
                                     batch_size=self.batch_size, lr=self.learning_rate,
                                     rng=Rng(self.random_state))
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "state_")
        return self.state_.logits(check_array(X, dtype=np.float32))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
