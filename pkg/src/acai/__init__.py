"""Convolutional autoencoders with an interpolation critic, in numpy.

The package trains seven autoencoder variants on a synthetic lines dataset
or MNIST, measures how realistic and smooth their latent interpolations are,
and probes the learned codes with linear classifiers and K-means.
"""

from .autodiff import ConfigError, ShapeError, Tensor, no_grad
from .downstream import (ClassifierState, classifier_accuracy, classifier_train_step, clustering_accuracy,
                         confusion_matrix, kmeans, pca_whiten_apply, pca_whiten_fit)
from .estimators import AutoencoderEstimator, KMeansBestOf, LatentClassifier, PCAWhitening
from .io import FormatError, VersionError, load_checkpoint, load_state, save_checkpoint, save_state
from .lines import build_reference_set, render_line, sample_batch
from .metrics import MetricsReport, evaluate_lines, evaluate_pairs
from .models import VARIANTS, ArchConfig, AutoencoderModel, ModelVariant, TrainingDivergence, train_step
from .rng import Rng
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "AutoencoderEstimator", "AutoencoderModel", "ClassifierState", "ConfigError", "FormatError",
    "KMeansBestOf", "LatentClassifier", "MetricsReport", "ModelVariant", "PCAWhitening", "Rng", "ShapeError",
    "Tensor", "TrainConfig", "TrainingDivergence", "VARIANTS", "VersionError", "build_reference_set",
    "classifier_accuracy", "classifier_train_step", "clustering_accuracy", "confusion_matrix",
    "evaluate_lines", "evaluate_pairs", "kmeans", "load_checkpoint", "load_state", "no_grad",
    "pca_whiten_apply", "pca_whiten_fit", "render_line", "sample_batch", "save_checkpoint", "save_state",
    "train", "train_step",
]
