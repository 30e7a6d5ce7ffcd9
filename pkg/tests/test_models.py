import copy
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from acai import autodiff as ad
from acai.autodiff import ConfigError, Tensor
from acai.lines import sample_batch
from acai.models import (VARIANTS, ArchConfig, AutoencoderModel, Codebook, ModelVariant, Optimizers,
                         TrainingDivergence, acai_ae_loss, acai_critic_loss, acai_interpolant, aae_losses, corrupt,
                         loss_baseline, loss_denoising, loss_dropout, loss_vae, pair_reverse, sample_alpha,
                         train_step, vae_sample, vq_ema_update, vq_forward, vq_losses, vq_nearest,
                         vq_straight_through)
from acai.rng import Rng

LINES = ArchConfig.preset("lines64")


def make(kind="baseline", arch=LINES, seed=0, **kw):
    return AutoencoderModel(arch, ModelVariant(kind, **kw), Rng(seed))


def batch(n=8, seed=0):
    return sample_batch(Rng(seed), n)[0]


def snapshot(params):
    return [p.data.copy() for p in params]


def unchanged(params, snap):
    return all(np.array_equal(p.data, s) for p, s in zip(params, snap))


def zero_last_layer(net, name):
    net.params[f"{name}.w"].data[...] = 0
    net.params[f"{name}.b"].data[...] = 0


# -- architecture ---------------------------------------------------------------------


@pytest.mark.parametrize("preset, latent, grid, channels", [
    ("lines64", 64, 2, 16),
    ("real256", 256, 4, 16),
    ("real32", 32, 4, 2),
])
def test_presets(preset, latent, grid, channels):
    arch = ArchConfig.preset(preset)
    assert (arch.latent_dim, arch.grid, arch.latent_channels) == (latent, grid, channels)


def test_lines_channel_schedule():
    assert LINES.widths == [2, 4, 8, 16]
    m = make()
    assert m.encoder.params["f1.w"].shape == (16, 16, 3, 3)
    assert m.decoder.params["b0c0.w"].shape == (16, 16, 3, 3)
    assert m.decoder.params["f1.w"].shape == (1, 2, 3, 3)


@pytest.mark.parametrize("n", [1, 3, 5])
@pytest.mark.parametrize("preset", ["lines64", "real256", "real32"])
def test_encode_decode_shapes(preset, n):
    arch = ArchConfig.preset(preset)
    m = AutoencoderModel(arch, ModelVariant(), Rng(0))
    x = Rng(1).uniform((n, 1, 32, 32))
    z = m.encode(x)
    assert z.shape == (n, arch.latent_dim)
    assert m.decode(z).shape == x.shape


@pytest.mark.parametrize("kw", [dict(blocks=6), dict(blocks=0), dict(latent_dim=65), dict(base_channels=0)])
def test_bad_arch(kw):
    with pytest.raises(ConfigError):
        ArchConfig(**kw)


@pytest.mark.parametrize("kw", [dict(kind="gan"), dict(lam=-1), dict(gamma=1.5), dict(codebook_size=1),
                                dict(dropout_rate=1.0), dict(ema_decay=1.0), dict(noise_sigma=-0.1)])
def test_bad_variant(kw):
    with pytest.raises(ConfigError):
        ModelVariant(**kw)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        ArchConfig.preset("huge")


def test_acai_critic_mirrors_encoder():
    m = make("acai")
    enc = {k: v.shape for k, v in m.encoder.params.items()}
    crit = {k: v.shape for k, v in m.critic.params.items()}
    assert enc == crit


def test_aae_critic_shapes():
    m = make("aae")
    assert {k: v.shape for k, v in m.critic.params.items()} == {
        "d0.w": (100, 64), "d0.b": (100,), "d1.w": (100, 100), "d1.b": (100,), "out.w": (1, 100), "out.b": (1,)}


def test_decoder_params_all_receive_gradient():
    m = make()
    loss = loss_baseline(m, Tensor(Rng(3).uniform((4, 1, 32, 32))))
    loss.backward()
    for name, p in m.decoder.named_parameters().items():
        assert p.grad is not None and np.any(p.grad != 0), name


def test_decoder_output_is_unbounded():
    m = make()
    out = m.decode(Rng(0).normal((4, 64), std=50.0))
    assert out.min() < 0 or out.max() > 1


# -- reconstruction objectives -----------------------------------------------------------


def test_baseline_loss_on_zeros_is_mean_square_output():
    m = make()
    x = np.zeros((3, 1, 32, 32), np.float32)
    assert float(loss_baseline(m, Tensor(x)).data) == pytest.approx(float(np.mean(m.reconstruct(x) ** 2)), rel=1e-5)


def test_baseline_overfits_tiny_batch():
    m = make()
    opt = Optimizers(m, lr=1e-3)
    x = batch(4)
    losses = [train_step(m, x, Rng(0), opt)["loss"] for _ in range(200)]
    assert losses[-1] < 0.8 * losses[0]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_dropout_rate_zero_matches_baseline():
    m = make("dropout")
    x = Tensor(batch())
    assert float(loss_dropout(m, x, Rng(0), rate=0.0).data) == float(loss_baseline(m, x).data)


def test_dropout_seeded_and_inference_clean():
    m = make("dropout")
    x = Tensor(batch())
    a = float(loss_dropout(m, x, Rng(5)).data)
    assert a == float(loss_dropout(m, x, Rng(5)).data)
    assert a != float(loss_baseline(m, x).data)
    np.testing.assert_array_equal(m.reconstruct(x.data), m.reconstruct(x.data))


def test_denoising_sigma_zero_matches_baseline():
    m = make("denoising")
    x = Tensor(batch())
    assert float(loss_denoising(m, x, Rng(0), sigma=0.0).data) == float(loss_baseline(m, x).data)
    assert m.variant.noise_sigma == 1.0


def test_corruption_variance():
    x = np.zeros((64, 1, 32, 32), np.float32)
    noisy = corrupt(x, 1.0, Rng(2))
    assert abs(np.mean((noisy - x) ** 2) - 1.0) < 0.02


# -- VAE -------------------------------------------------------------------------------------


def test_vae_kl_zero_at_standard_posterior():
    m = make("vae")
    zero_last_layer(m.encoder, "f1")
    _, recon, kl = loss_vae(m, Tensor(batch(2)), Rng(0))
    assert float(kl.data) == 0.0
    assert float(recon.data) > 0


def test_vae_loss_at_least_reconstruction():
    m = make("vae")
    total, recon, kl = loss_vae(m, Tensor(batch(4)), Rng(1))
    assert float(kl.data) >= 0
    assert float(total.data) >= float(recon.data)


def test_vae_outputs_in_unit_interval_and_samples():
    m = make("vae")
    imgs = vae_sample(m, Rng(0), 3)
    assert imgs.shape == (3, 1, 32, 32) and imgs.min() >= 0 and imgs.max() <= 1
    np.testing.assert_array_equal(imgs, vae_sample(m, Rng(0), 3))


def test_vae_single_datapoint_overfit():
    m = make("vae")
    opt = Optimizers(m, lr=1e-3)
    x = batch(1)
    losses = np.array([train_step(m, x, Rng(k), opt)["loss"] for k in range(500)])
    windows = losses.reshape(10, 50).mean(1)
    assert windows[-1] < 0.5 * windows[0]
    assert np.sum(np.diff(windows) < 0) >= 7


# -- AAE -------------------------------------------------------------------------------------


def test_aae_critic_at_chance_is_ln2():
    m = make("aae")
    zero_last_layer(m.critic, "out")
    ae_loss, critic_loss = aae_losses(m, Tensor(batch(4)), Rng(0))
    assert float(critic_loss.data) == pytest.approx(math.log(2), abs=1e-6)


@given(st.floats(-20, 20))
def test_identical_inputs_make_constant_critic_optimal(logit):
    # the same code labelled both 1 and 0 cannot beat a 0 logit
    loss = ad.bce_with_logits(Tensor(np.array([logit, logit], np.float32)), np.array([1, 0], np.float32))
    assert float(loss.data) >= math.log(2) - 1e-6


def test_aae_losses_touch_disjoint_parameters():
    m = make("aae")
    ae_loss, critic_loss = aae_losses(m, Tensor(batch(4)), Rng(0))
    critic_loss.backward()
    assert all(p.grad is None for p in m.ae_parameters())
    assert any(p.grad is not None for p in m.critic_parameters())
    for p in m.critic_parameters():
        p.grad = None
    ae_loss.backward()
    assert all(p.grad is None for p in m.critic_parameters())
    assert all(p.grad is not None for p in m.encoder.parameters())


# -- VQ-VAE ----------------------------------------------------------------------------------


def test_vq_single_entry():
    z = Rng(0).normal((3, 4, 2, 2))
    zq, idx = vq_forward(z, np.ones((1, 4), np.float32))
    assert np.all(idx == 0) and np.all(zq == 1)


def test_vq_exact_entry_and_zero_commitment():
    e = Rng(1).normal((5, 3))
    z = e[[2, 4, 4, 0]].T.reshape(1, 3, 2, 2).copy()
    zq, idx = vq_forward(z, e)
    np.testing.assert_array_equal(idx.ravel(), [2, 4, 4, 0])
    np.testing.assert_array_equal(zq, z)
    x = Tensor(np.zeros((1, 1, 2, 2), np.float32))
    loss = vq_losses(x, x, Tensor(z), zq, beta=0.25)
    assert float(loss.data) == 0.0


def test_vq_ties_go_to_lowest_index():
    e = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]], np.float32)
    assert list(vq_nearest(np.array([[0.0, 0.0], [1.0, 0.0]]), e)) == [0, 0]


def test_vq_ema_with_zero_decay_is_one_kmeans_step():
    cb = Codebook(np.array([[0.0, 0.0], [10.0, 10.0], [-50.0, 0.0]], np.float32))
    vecs = np.array([[1.0, 1.0], [-1.0, 0.0], [9.0, 11.0], [12.0, 10.0]], np.float32)
    z = vecs.T.reshape(1, 2, 2, 2)
    _, idx = vq_forward(z, cb.entries)
    vq_ema_update(cb, z, idx, decay=0.0)
    np.testing.assert_allclose(cb.entries[0], [0.0, 0.5])
    np.testing.assert_allclose(cb.entries[1], [10.5, 10.5])
    np.testing.assert_array_equal(cb.entries[2], [-50.0, 0.0])  # unassigned entry stays put


def test_vq_ema_decay_blends_counts():
    cb = Codebook(np.zeros((2, 1), np.float32))
    z = np.ones((1, 1, 1, 1), np.float32)
    vq_ema_update(cb, z, np.array([[0]]), decay=0.99)
    np.testing.assert_allclose(cb.ema_counts, [0.01, 0.0], rtol=1e-6)
    np.testing.assert_allclose(cb.entries[0], [1.0], rtol=1e-5)


def test_straight_through_gradient_is_identity():
    rng = Rng(2)
    z = Tensor(rng.normal((2, 3, 2, 2)), requires_grad=True)
    zq = rng.normal((2, 3, 2, 2))
    target = rng.normal((2, 3, 2, 2))
    ad.mse(vq_straight_through(z, zq), Tensor(target)).backward()
    direct = Tensor(zq.copy(), requires_grad=True)
    ad.mse(direct, Tensor(target)).backward()
    np.testing.assert_allclose(vq_straight_through(Tensor(z.data), zq).data, zq, atol=1e-6)
    np.testing.assert_allclose(z.grad, direct.grad, rtol=1e-6)


def test_vq_decode_snaps_to_codebook():
    m = make("vqvae", codebook_size=8)
    z = Rng(3).normal((2, 64))
    np.testing.assert_array_equal(m.decode(z), m.decode(m.quantize(z)))


# -- ACAI ------------------------------------------------------------------------------------


def test_pairing_reverses_batch():
    np.testing.assert_array_equal(pair_reverse(5), [4, 3, 2, 1, 0])


def test_alpha_range_and_mean_square():
    a = sample_alpha(Rng(0), 200_000)
    assert a.min() >= 0 and a.max() <= 0.5
    assert np.mean(a ** 2) == pytest.approx(1 / 12, rel=0.02)  # (0.5)^2 / 3


def test_interpolant_endpoints():
    m = make("acai")
    x1, x2 = batch(3, 1), batch(3, 2)
    np.testing.assert_array_equal(acai_interpolant(m, x1, x2, 0.0), m.reconstruct(x2))
    mid = m.decode(0.5 * m.encode(x1) + 0.5 * m.encode(x2))
    np.testing.assert_allclose(acai_interpolant(m, x1, x2, 0.5), mid, atol=1e-6)
    for a in (0.1, 0.37):
        np.testing.assert_allclose(acai_interpolant(m, x1, x1, a), m.reconstruct(x1), atol=1e-5)


@pytest.mark.parametrize("a", [-0.01, 0.51, 1.0])
def test_interpolant_alpha_range(a):
    m = make("acai")
    with pytest.raises(ValueError):
        acai_interpolant(m, batch(1), batch(1), a)


class StubCritic:
    """Returns a fixed score per row."""

    def __init__(self, scores):
        self.scores = np.asarray(scores, np.float32)

    def __call__(self, x, params=None):
        return Tensor(self.scores)


def test_critic_loss_zero_for_exact_targets():
    alpha = np.array([[0.1], [0.3], [0.45]], np.float32)
    x = np.zeros((3, 1, 32, 32), np.float32)
    loss = acai_critic_loss(StubCritic(np.r_[alpha.ravel(), 0, 0, 0]), x, x, x, alpha, 0.2)
    assert float(loss.data) == 0.0


def test_critic_loss_constant_zero_critic():
    alpha = sample_alpha(Rng(4), 4096)
    x = np.zeros((4096, 1, 32, 32), np.float32)
    loss = float(acai_critic_loss(StubCritic(np.zeros(8192)), x, x, x, alpha, 0.2).data)
    assert loss == pytest.approx(float(np.mean(alpha ** 2)), rel=1e-5)
    assert loss == pytest.approx(1 / 12, rel=0.05)


def test_critic_loss_gamma_one_scores_raw_data():
    m = make("acai")
    x, recon, x_alpha = batch(4, 1), batch(4, 2), batch(4, 3)
    alpha = sample_alpha(Rng(0), 4)
    loss = float(acai_critic_loss(m.critic, x, x_alpha, recon, alpha, 1.0).data)
    d_alpha, d_x = m.critic_score(x_alpha), m.critic_score(x)
    expected = np.mean((d_alpha - alpha.ravel()) ** 2) + np.mean(d_x ** 2)
    assert loss == pytest.approx(expected, rel=1e-5)


def test_ae_loss_lambda_zero_is_baseline():
    m = make("acai", lam=0.0)
    x = Tensor(batch())
    loss, _, _ = acai_ae_loss(m, x, sample_alpha(Rng(0), 8))
    assert float(loss.data) == float(loss_baseline(m, x).data)


def test_ae_loss_with_silent_critic_is_reconstruction():
    m = make("acai")
    zero_last_layer(m.critic, "f1")
    x = Tensor(batch())
    loss, _, _ = acai_ae_loss(m, x, sample_alpha(Rng(0), 8))
    assert float(loss.data) == pytest.approx(float(loss_baseline(m, x).data), rel=1e-6)
    assert (m.variant.lam, m.variant.gamma) == (0.5, 0.2)


def test_ae_loss_gradient_reaches_encoder_through_critic_only_into_theta():
    m = make("acai", lam=100.0)
    loss, _, _ = acai_ae_loss(m, Tensor(batch()), sample_alpha(Rng(0), 8))
    loss.backward()
    assert all(p.grad is None for p in m.critic_parameters())
    base = make("acai", lam=0.0)
    bl, _, _ = acai_ae_loss(base, Tensor(batch()), sample_alpha(Rng(0), 8))
    bl.backward()
    diff = [np.abs(p.grad - q.grad).max() for p, q in zip(m.encoder.parameters(), base.encoder.parameters())]
    assert max(diff) > 0  # the regulariser moves the encoder gradient


# -- train_step ------------------------------------------------------------------------------


def test_baseline_step_is_one_adam_step():
    m = make()
    ref = copy.deepcopy(m)
    opt = Optimizers(m)
    x = batch()
    train_step(m, x, Rng(0), opt)
    assert opt.ae.state.step == 1 and opt.critic is None
    loss_baseline(ref, Tensor(x)).backward()
    ref_opt = ad.Adam(ref.ae_parameters())
    ref_opt.step()
    for p, q in zip(m.ae_parameters(), ref.ae_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
        assert p.grad is None


@pytest.mark.parametrize("kind", ["acai", "aae"])
def test_adversarial_step_isolates_parameter_groups(kind):
    m = make(kind)
    x = batch()
    ae_only, critic_only = copy.deepcopy(m), copy.deepcopy(m)
    train_step(m, x, Rng(7), Optimizers(m))

    # replay each objective by hand from the same pre-step parameters
    rng = Rng(7)
    if kind == "acai":
        alpha = sample_alpha(rng.derive("alpha"), len(x))
        ae_loss, _, _ = acai_ae_loss(ae_only, Tensor(x), alpha)
        _, x_alpha, recon = acai_ae_loss(critic_only, Tensor(x), alpha)
        critic_loss = acai_critic_loss(critic_only.critic, x, x_alpha, recon, alpha, 0.2)
    else:
        ae_loss, _ = aae_losses(ae_only, Tensor(x), rng.derive("prior"))
        _, critic_loss = aae_losses(critic_only, Tensor(x), rng.derive("prior"))
    ae_loss.backward()
    ad.Adam(ae_only.ae_parameters()).step()
    critic_loss.backward()
    ad.Adam(critic_only.critic_parameters()).step()

    for p, q in zip(m.ae_parameters(), ae_only.ae_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    for p, q in zip(m.critic_parameters(), critic_only.critic_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    # and each group really moved
    assert not unchanged(m.critic_parameters(), snapshot(ae_only.critic_parameters()))
    assert not unchanged(m.ae_parameters(), snapshot(critic_only.ae_parameters()))


def test_acai_lambda_zero_trace_matches_baseline():
    base, acai = make(), make("acai", lam=0.0)
    ob, oa = Optimizers(base), Optimizers(acai)
    for k in range(5):
        x = batch(8, k)
        lb = train_step(base, x, Rng(k), ob)["loss"]
        la = train_step(acai, x, Rng(k), oa)["loss"]
        assert la == lb
    for p, q in zip(base.ae_parameters(), acai.ae_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


@pytest.mark.parametrize("kind", VARIANTS)
def test_seeded_runs_identical(kind):
    traces = []
    for _ in range(2):
        m = make(kind, seed=3)
        opt = Optimizers(m)
        traces.append([train_step(m, batch(8, k), Rng(100 + k), opt) for k in range(3)])
    assert traces[0] == traces[1]
    assert all(math.isfinite(v) for rec in traces[0] for v in rec.values())


def test_nan_batch_raises_divergence():
    m = make()
    x = batch()
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergence):
        train_step(m, x, Rng(0), Optimizers(m))
