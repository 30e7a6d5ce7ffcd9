import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from acai.autodiff import ConfigError, Tensor
from acai.downstream import (ClassifierState, accuracy, classifier_accuracy, classifier_train_step,
                             clustering_accuracy, confusion_matrix, fit_classifier, kmeans, lloyd,
                             pca_unwhiten, pca_whiten_apply, pca_whiten_fit, predict_clusters, tandem_hook,
                             within_cluster_ss)
from acai.models import ArchConfig, AutoencoderModel, ModelVariant
from acai.rng import Rng
from acai.trainer import ArrayData, TrainConfig, train


# -- linear probe -------------------------------------------------------------------------


@pytest.mark.parametrize("C", [2, 10, 37])
def test_fresh_classifier_loss_is_ln_c(C):
    state = ClassifierState(5, C)
    z = Rng(0).normal((16, 5))
    labels = Rng(1).integers(0, C, 16)
    assert classifier_train_step(z, labels, state) == pytest.approx(math.log(C), rel=1e-6)


def test_classifier_step_leaves_autoencoder_alone():
    model = AutoencoderModel(ArchConfig.preset("real32"), ModelVariant(), Rng(0))
    before = {k: v.data.copy() for k, v in model.named_parameters().items()}
    x = Tensor(Rng(1).uniform((8, 1, 32, 32)))
    z, _ = model.encode_graph(x)  # a live graph tensor
    state = ClassifierState(32, 10)
    classifier_train_step(z, np.arange(8), state)
    for k, v in model.named_parameters().items():
        np.testing.assert_array_equal(v.data, before[k])
        assert v.grad is None
    assert np.any(state.weight.data != 0)


def test_classifier_rejects_bad_labels():
    state = ClassifierState(3, 4)
    with pytest.raises(ValueError):
        classifier_train_step(np.zeros((2, 3)), np.array([0, 4]), state)
    with pytest.raises(ValueError):
        classifier_train_step(np.zeros((2, 3)), np.array([-1, 0]), state)
    with pytest.raises(ConfigError):
        ClassifierState(3, 1)


def test_separable_toy_reaches_full_accuracy():
    rng = Rng(3)
    centers = 4.0 * rng.normal((5, 8))
    labels = rng.integers(0, 5, 500)
    z = centers[labels] + 0.3 * rng.normal((500, 8))
    state = fit_classifier(z, labels, 5, steps=2000, batch_size=64, lr=1e-2, rng=Rng(4))
    assert classifier_accuracy(z, labels, state) == 1.0


def test_accuracy_examples():
    labels = np.repeat(np.arange(10), 7)
    assert accuracy(labels, labels) == 1.0
    assert accuracy(np.zeros_like(labels), labels) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        accuracy([], [])


def test_constant_classifier_accuracy_on_balanced_data():
    state = ClassifierState(2, 10)
    state.bias.data[3] = 1.0
    labels = np.repeat(np.arange(10), 5)
    assert classifier_accuracy(np.zeros((50, 2)), labels, state) == pytest.approx(0.1)


def test_tandem_hook_trains_probe_during_autoencoder_training():
    imgs = Rng(0).uniform((40, 1, 32, 32))
    labels = (imgs.reshape(40, -1).mean(1) > 0.5).astype(np.int64)
    probe = ClassifierState(32, 2, lr=1e-3)
    cfg = TrainConfig(variant=ModelVariant(), arch=ArchConfig.preset("real32"), total_samples=64, batch_size=8)
    train(cfg, data=ArrayData(imgs, labels), step_hook=tandem_hook(probe))
    assert probe.opt.state.step == 8
    with pytest.raises(ConfigError):
        train(cfg, data=ArrayData(imgs), step_hook=tandem_hook(probe))


# -- whitening --------------------------------------------------------------------------------


def test_whitening_isotropic_gaussian():
    x = Rng(7).normal((10_000, 6), dtype=np.float64)
    w = pca_whiten_apply(pca_whiten_fit(x), x)
    np.testing.assert_allclose(np.cov(w, rowvar=False), np.eye(6), atol=0.05)


def test_whitening_correlated_data():
    rng = Rng(8)
    a = rng.normal((4, 4), dtype=np.float64)
    x = rng.normal((5000, 4), dtype=np.float64) @ a + 3.0
    t = pca_whiten_fit(x)
    w = pca_whiten_apply(t, x)
    np.testing.assert_allclose(w.mean(0), 0, atol=1e-9)
    np.testing.assert_allclose(np.cov(w, rowvar=False, bias=True), np.eye(4), atol=1e-6)
    assert np.all(np.diff(t.eigenvalues) <= 0)
    np.testing.assert_allclose(pca_unwhiten(t, w), x, atol=1e-8)


def test_whitening_constant_dimension_is_clamped():
    x = Rng(9).normal((100, 3), dtype=np.float64)
    x[:, 1] = 2.5
    w = pca_whiten_apply(pca_whiten_fit(x), x)
    assert np.all(np.isfinite(w))
    assert np.abs(w).max() < 1e3


@given(arrays(np.float64, (3,), elements=st.floats(-10, 10)), arrays(np.float64, (3,), elements=st.floats(-10, 10)))
def test_whitening_differences_ignore_the_mean(a, b):
    x = Rng(10).normal((50, 3), dtype=np.float64)
    t = pca_whiten_fit(x)
    diff = pca_whiten_apply(t, a[None]) - pca_whiten_apply(t, b[None])
    np.testing.assert_allclose(diff[0], (a - b) @ t.basis * t.scales, atol=1e-9)


@pytest.mark.parametrize("shape", [(1, 3), (5,)])
def test_whitening_needs_two_samples(shape):
    with pytest.raises(ValueError):
        pca_whiten_fit(np.zeros(shape))


# -- K-means ---------------------------------------------------------------------------------


def test_kmeans_single_cluster_closed_form():
    x = Rng(0).normal((40, 3), dtype=np.float64)
    res = kmeans(x, 1, 3, Rng(1))
    np.testing.assert_allclose(res.centers[0], x.mean(0), atol=1e-12)
    assert res.objective == pytest.approx(x.var(0).sum() * len(x), rel=1e-12)


def test_kmeans_separates_blobs():
    rng = Rng(2)
    a = rng.normal((30, 2), dtype=np.float64)
    b = rng.normal((30, 2), dtype=np.float64) + 50.0
    res = kmeans(np.vstack([a, b]), 2, 4, Rng(3))
    assert len(set(res.assignments[:30])) == 1 and len(set(res.assignments[30:])) == 1
    assert res.assignments[0] != res.assignments[-1]


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_lloyd_objective_non_increasing(seed, C):
    x = Rng(seed).normal((60, 3), dtype=np.float64)
    trace = []
    lloyd(x, x[:C], trace=trace)
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


def test_kmeans_best_restart_and_determinism():
    x = Rng(4).normal((200, 5), dtype=np.float64)
    res = kmeans(x, 6, 8, Rng(5))
    singles = [lloyd(x, np.unique(x, axis=0)[Rng(5).derive("restart", r).choice(len(x), 6)])[2] for r in range(8)]
    assert res.objective == min(singles)
    assert res.restart == int(np.argmin(singles))
    again = kmeans(x, 6, 8, Rng(5))
    np.testing.assert_array_equal(res.assignments, again.assignments)
    assert within_cluster_ss(x, res.assignments, res.centers) == pytest.approx(res.objective)
    np.testing.assert_array_equal(predict_clusters(x, res.centers), res.assignments)


def test_kmeans_too_many_clusters():
    x = np.array([[0.0], [0.0], [1.0]])
    with pytest.raises(ConfigError):
        kmeans(x, 3, 1, Rng(0))
    assert kmeans(x, 2, 1, Rng(0)).objective == 0


def test_lloyd_keeps_empty_cluster_center():
    x = np.array([[0.0], [1.0]])
    assign, centers, _ = lloyd(x, np.array([[0.5], [100.0]]))
    assert list(assign) == [0, 0] and centers[1, 0] == 100.0


# -- clustering accuracy ------------------------------------------------------------------


def test_confusion_matrix_orientation():
    m = confusion_matrix([0, 0, 1, 2], [1, 1, 0, 2], 3)
    assert m[0, 1] == 2 and m[1, 0] == 1 and m[2, 2] == 1 and m.sum() == 4


def test_clustering_accuracy_examples():
    assert clustering_accuracy(np.eye(4, dtype=int)) == 1.0
    assert clustering_accuracy([[10, 0], [0, 10]]) == 1.0
    assert clustering_accuracy([[0, 10], [10, 0]]) == 1.0
    assert clustering_accuracy([[5, 5], [5, 5]]) == 0.5


def brute_force(m):
    n = len(m)
    return max(sum(m[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / np.sum(m)


@pytest.mark.parametrize("seed", range(5))
def test_clustering_accuracy_matches_brute_force(seed):
    m = Rng(seed).integers(0, 50, (6, 6))
    m[0, 0] += 1  # never empty
    assert clustering_accuracy(m) == pytest.approx(brute_force(m), abs=1e-12)


@given(arrays(np.int64, (4, 4), elements=st.integers(0, 20)))
def test_clustering_accuracy_property(m):
    if m.sum() == 0:
        with pytest.raises(ValueError):
            clustering_accuracy(m)
        return
    acc = clustering_accuracy(m)
    assert acc == pytest.approx(brute_force(m.tolist()), abs=1e-12)
    assert clustering_accuracy(m[::-1]) == pytest.approx(acc)


def test_clustering_accuracy_rejects_non_square():
    with pytest.raises(ValueError):
        clustering_accuracy(np.ones((2, 3)))
