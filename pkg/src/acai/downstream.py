"""Uses of a learned representation: linear probes, whitening and clustering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import ConfigError, Tensor
from .rng import Rng

EIG_FLOOR = 1e-6
MAX_LLOYD_ITERS = 300


# ---------------------------------------------------------------------------
# single-layer classifier
# ---------------------------------------------------------------------------


class ClassifierState:
    """Dense ``d -> C`` softmax layer with its own Adam optimiser.

    Weights start at zero, so the first loss is exactly ``ln C``.
    """

    def __init__(self, n_features: int, n_classes: int, lr: float = 1e-4):
        if n_features < 1 or n_classes < 2:
            raise ConfigError("a classifier needs at least one feature and two classes")
        self.n_classes = n_classes
        self.weight = ad.zeros_param((n_classes, n_features), "classifier.w")
        self.bias = ad.zeros_param((n_classes,), "classifier.b")
        self.opt = ad.Adam([self.weight, self.bias], lr=lr)

    def logits(self, features: np.ndarray) -> np.ndarray:
        f = np.asarray(features, dtype=np.float32)
        return f @ self.weight.data.T + self.bias.data

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)


def classifier_train_step(latent, labels: np.ndarray, state: ClassifierState) -> float:
    """One Adam step on softmax cross-entropy; returns the pre-step loss.

    ``latent`` may be a graph tensor: it is detached, so no gradient ever
    reaches whatever produced it.
    """
    z = ad.stop_gradient(latent if isinstance(latent, Tensor) else Tensor(np.asarray(latent, np.float32)))
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= state.n_classes:
        raise ValueError(f"labels must lie in [0, {state.n_classes})")
    state.opt.zero_grad()
    loss = ad.softmax_cross_entropy(ad.dense(z, state.weight, state.bias), labels)
    loss.backward()
    state.opt.step()
    state.opt.zero_grad()
    return float(loss.data)


def classifier_accuracy(latents: np.ndarray, labels: np.ndarray, state: ClassifierState) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(state.predict(latents) == labels))


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError("predictions and labels must be non-empty and the same shape")
    return float(np.mean(predictions == labels))


def fit_classifier(features: np.ndarray, labels: np.ndarray, n_classes: int, *, steps: int,
                   batch_size: int = 64, lr: float = 1e-4, rng: Rng | None = None) -> ClassifierState:
    """Train a probe on fixed features with minibatches sampled with replacement."""
    features = np.asarray(features, dtype=np.float32).reshape(len(features), -1)
    labels = np.asarray(labels)
    rng = Rng(0) if rng is None else rng
    state = ClassifierState(features.shape[1], n_classes, lr=lr)
    for k in range(steps):
        idx = rng.derive("batch", k).integers(0, len(features), batch_size)
        classifier_train_step(features[idx], labels[idx], state)
    return state


def tandem_hook(state: ClassifierState):
    """Training-loop hook that fits ``state`` on the current batch's latents."""

    def hook(train_state, x, y, rng):
        if y is None:
            raise ConfigError("the in-tandem classifier needs labelled data")
        z = train_state.model.encode(x)
        return {"classifier_loss": classifier_train_step(z, y, state)}

    return hook


# ---------------------------------------------------------------------------
# PCA whitening
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WhitenTransform:
    mean: np.ndarray  # (d,)
    basis: np.ndarray  # (d, d), eigenvectors in columns
    scales: np.ndarray  # (d,), 1 / sqrt(max(eigenvalue, floor))
    eigenvalues: np.ndarray


def pca_whiten_fit(latents: np.ndarray) -> WhitenTransform:
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError(f"whitening needs at least 2 samples in a 2-D array, got shape {x.shape}")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False, bias=True).reshape(x.shape[1], x.shape[1])
    eig, vec = np.linalg.eigh(cov)
    order = np.argsort(eig)[::-1]
    eig, vec = eig[order], vec[:, order]
    return WhitenTransform(mean=mean, basis=vec, scales=1.0 / np.sqrt(np.maximum(eig, EIG_FLOOR)),
                           eigenvalues=eig)


def pca_whiten_apply(transform: WhitenTransform, latents: np.ndarray) -> np.ndarray:
    x = np.asarray(latents, dtype=np.float64)
    return (x - transform.mean) @ transform.basis * transform.scales


def pca_unwhiten(transform: WhitenTransform, white: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pca_whiten_apply` on dimensions above the floor."""
    w = np.asarray(white, dtype=np.float64)
    keep = transform.eigenvalues > EIG_FLOOR
    inv = np.where(keep, 1.0 / transform.scales, 0.0)
    return (w * inv) @ transform.basis.T + transform.mean


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------


def _assign(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((points ** 2).sum(1)[:, None] - 2.0 * points @ centers.T + (centers ** 2).sum(1)[None, :])
    idx = np.argmin(d2, axis=1)
    return idx, np.maximum(d2[np.arange(len(points)), idx], 0.0)


def within_cluster_ss(points: np.ndarray, assignments: np.ndarray, centers: np.ndarray) -> float:
    return float(((points - centers[assignments]) ** 2).sum())


def lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int = MAX_LLOYD_ITERS,
          trace: list[float] | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd iterations from ``centers`` until assignments stop changing.

    An emptied cluster keeps its previous center.  ``trace`` collects the
    objective after each assignment step.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = np.array(centers, dtype=np.float64)
    assign = None
    for _ in range(max_iter):
        new, _ = _assign(points, centers)
        if trace is not None:
            trace.append(within_cluster_ss(points, new, centers))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(len(centers)):
            members = points[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return assign, centers, within_cluster_ss(points, assign, centers)


@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    objective: float
    restart: int


def kmeans(points: np.ndarray, C: int, restarts: int, rng: Rng) -> KMeansResult:
    """Best of ``restarts`` Lloyd runs, each seeded with ``C`` distinct data points.

    Restart ``r`` draws from ``rng.derive("restart", r)``; the lowest
    objective wins, ties to the earliest restart.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if restarts < 1 or C < 1:
        raise ConfigError("C and restarts must be at least 1")
    distinct = np.unique(points, axis=0)
    if C > len(distinct):
        raise ConfigError(f"C={C} exceeds the {len(distinct)} distinct points")
    best = None
    for r in range(restarts):
        seeds = distinct[rng.derive("restart", r).choice(len(distinct), C)]
        assign, centers, obj = lloyd(points, seeds)
        if best is None or obj < best.objective:
            best = KMeansResult(assign, centers, obj, r)
    return best


def predict_clusters(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return _assign(np.asarray(points, dtype=np.float64), np.asarray(centers, dtype=np.float64))[0]


# ---------------------------------------------------------------------------
# clustering accuracy
# ---------------------------------------------------------------------------


def confusion_matrix(clusters, labels, C: int | None = None) -> np.ndarray:
    """Counts indexed ``[cluster, class]``."""
    clusters, labels = np.asarray(clusters, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if clusters.shape != labels.shape:
        raise ValueError("clusters and labels differ in shape")
    C = int(max(clusters.max(initial=-1), labels.max(initial=-1)) + 1) if C is None else C
    out = np.zeros((C, C), dtype=np.int64)
    np.add.at(out, (clusters, labels), 1)
    return out


def clustering_accuracy(confusion) -> float:
    """Accuracy under the best one-to-one matching of clusters to classes."""
    m = np.asarray(confusion)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {m.shape}")
    total = m.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    rows, cols = linear_sum_assignment(m, maximize=True)
    return float(m[rows, cols].sum() / total)
