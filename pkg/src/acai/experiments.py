"""End-to-end runs: the lines comparison and the MNIST probes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import ConfigError
from .downstream import (ClassifierState, classifier_accuracy, clustering_accuracy, confusion_matrix,
                         fit_classifier, kmeans, pca_whiten_apply, pca_whiten_fit, predict_clusters,
                         tandem_hook)
from .metrics import DEFAULT_PAIRS, DEFAULT_REFS, DEFAULT_STEPS, MetricsReport, evaluate_lines
from .models import ArchConfig, ModelVariant
from .rng import Rng
from .trainer import DESK_SAMPLES, ArrayData, TrainConfig, TrainState, train

N_CLASSES = 10


@dataclass(frozen=True)
class LinesSummary:
    variant: str
    reports: tuple[MetricsReport, ...]

    @property
    def mean_distance(self) -> float:
        return float(np.mean([r.mean_distance for r in self.reports]))

    @property
    def smoothness(self) -> float:
        return float(np.mean([r.smoothness for r in self.reports]))


def lines_run(kind: str, seed: int, samples: int = DESK_SAMPLES, arch: str = "lines64", *,
              n_pairs: int = DEFAULT_PAIRS, N: int = DEFAULT_STEPS, D: int = DEFAULT_REFS,
              log: Callable[[str], None] | None = None) -> tuple[TrainState, MetricsReport]:
    """Train one variant on fresh line images and score its interpolations."""
    config = TrainConfig(variant=ModelVariant(kind), arch=ArchConfig.preset(arch),
                         total_samples=samples, seed=seed)
    state = train(config, log=log)
    report = evaluate_lines(state.model, Rng(seed).derive("final-eval"), n_pairs, N, D)
    return state, report


def lines_comparison(kinds: Sequence[str], seeds: Sequence[int], samples: int = DESK_SAMPLES,
                     **kwargs) -> dict[str, LinesSummary]:
    out = {}
    for kind in kinds:
        reports = tuple(lines_run(kind, s, samples, **kwargs)[1] for s in seeds)
        out[kind] = LinesSummary(kind, reports)
    return out


# ---------------------------------------------------------------------------
# MNIST
# ---------------------------------------------------------------------------


def _flat(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float32).reshape(len(images), -1)


def pixel_baseline(data: dict[str, np.ndarray], steps: int = DESK_SAMPLES // 64, *, batch_size: int = 64,
                   lr: float = 1e-4, seed: int = 0) -> float:
    """Test accuracy of a softmax layer fitted directly on pixels."""
    state = fit_classifier(_flat(data["train_images"]), data["train_labels"], N_CLASSES, steps=steps,
                           batch_size=batch_size, lr=lr, rng=Rng(seed).derive("pixels"))
    return classifier_accuracy(_flat(data["test_images"]), data["test_labels"], state)


@dataclass(frozen=True)
class TandemResult:
    variant: str
    accuracy: float
    state: TrainState
    classifier: ClassifierState


def tandem_run(kind: str, data: dict[str, np.ndarray], *, samples: int = DESK_SAMPLES, arch: str = "real32",
               batch_size: int = 64, seed: int = 0, lr: float = 1e-4,
               log: Callable[[str], None] | None = None) -> TandemResult:
    """Train an autoencoder while a probe learns from its (detached) latents."""
    cfg = TrainConfig(variant=ModelVariant(kind), arch=ArchConfig.preset(arch), total_samples=samples,
                      batch_size=batch_size, seed=seed, lr=lr)
    clf = ClassifierState(cfg.arch.latent_dim, N_CLASSES, lr=lr)
    state = train(cfg, ArrayData(data["train_images"], data["train_labels"]),
                  step_hook=tandem_hook(clf), log=log)
    acc = classifier_accuracy(state.model.encode(data["test_images"]), data["test_labels"], clf)
    return TandemResult(kind, acc, state, clf)


def cluster_latents(train_latents: np.ndarray, test_latents: np.ndarray, test_labels: np.ndarray, *,
                    restarts: int = 32, seed: int = 0) -> float:
    """Whiten, pick the best of ``restarts`` K-means fits on the training codes,
    then score test codes under the optimal cluster-to-class matching."""
    if restarts < 1:
        raise ConfigError("restarts must be at least 1")
    t = pca_whiten_fit(train_latents)
    fit = kmeans(pca_whiten_apply(t, train_latents), N_CLASSES, restarts, Rng(seed).derive("kmeans"))
    clusters = predict_clusters(pca_whiten_apply(t, test_latents), fit.centers)
    return clustering_accuracy(confusion_matrix(clusters, test_labels, N_CLASSES))
