"""Convolutional autoencoders, their critics, and the seven training objectives.

Variants
--------
baseline   plain reconstruction
dropout    dropout on the latent code during training
denoising  Gaussian input corruption
vae        Gaussian posterior, Bernoulli decoder, KL to N(0, I)
aae        latent-space discriminator against an N(0, I) prior
vqvae      nearest-codebook quantisation with EMA codebook updates
acai       critic regresses the mixing coefficient of decoded interpolants
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Tensor
from .rng import Rng

VARIANTS = ("baseline", "dropout", "denoising", "vae", "aae", "vqvae", "acai")
IMAGE_SIZE = 32
EVAL_CHUNK = 256


class TrainingDivergence(FloatingPointError):
    """A loss or activation became NaN/Inf during a training step."""


@dataclass(frozen=True)
class ArchConfig:
    """Encoder/decoder geometry.

    ``blocks`` conv-conv-pool stages take the 32x32 input down to a
    ``32 / 2**blocks`` grid; the last conv emits ``latent_dim / grid**2``
    channels.  Block ``i`` uses ``base_channels * 2**i`` channels.
    """

    blocks: int = 4
    base_channels: int = 2
    latent_dim: int = 64
    out_channels: int = 1

    def __post_init__(self):
        if self.blocks < 1 or IMAGE_SIZE % (2 ** self.blocks):
            raise ConfigError(f"{self.blocks} pooling blocks do not divide a {IMAGE_SIZE}px image")
        if self.base_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.latent_dim < 1 or self.latent_dim % (self.grid ** 2):
            raise ConfigError(f"latent_dim {self.latent_dim} is not a multiple of grid area {self.grid ** 2}")

    @property
    def grid(self) -> int:
        return IMAGE_SIZE // (2 ** self.blocks)

    @property
    def latent_channels(self) -> int:
        return self.latent_dim // (self.grid ** 2)

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.blocks)]

    @classmethod
    def preset(cls, name: str) -> "ArchConfig":
        try:
            return ARCH_PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown arch preset {name!r}; choose from {sorted(ARCH_PRESETS)}") from None


ARCH_PRESETS = {
    "lines64": ArchConfig(blocks=4, base_channels=2, latent_dim=64),
    "real256": ArchConfig(blocks=3, base_channels=4, latent_dim=256),
    "real32": ArchConfig(blocks=3, base_channels=4, latent_dim=32),
}


@dataclass(frozen=True)
class ModelVariant:
    """Which objective to train and its hyperparameters."""

    kind: str = "baseline"
    dropout_rate: float = 0.5
    noise_sigma: float = 1.0
    lam: float = 0.5
    gamma: float = 0.2
    codebook_size: int = 512
    commitment: float = 0.25
    ema_decay: float = 0.99
    adversarial_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ConfigError(f"unknown variant {self.kind!r}; choose from {VARIANTS}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.codebook_size < 2:
            raise ConfigError("codebook needs at least 2 entries")
        for name in ("dropout_rate", "ema_decay"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.noise_sigma < 0 or self.commitment < 0 or self.adversarial_weight < 0:
            raise ConfigError("noise_sigma, commitment and adversarial_weight must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class Network:
    """Ordered bag of named parameters plus a forward function."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}

    def _conv(self, name: str, cin: int, cout: int, rng: Rng) -> str:
        self.params[f"{name}.w"] = ad.init_conv_params(cin * 9, (cout, cin, 3, 3), rng, f"{self.prefix}.{name}.w")
        self.params[f"{name}.b"] = ad.zeros_param((cout,), f"{self.prefix}.{name}.b")
        return name

    def _dense(self, name: str, din: int, dout: int, rng: Rng) -> str:
        self.params[f"{name}.w"] = ad.init_conv_params(din, (dout, din), rng, f"{self.prefix}.{name}.w")
        self.params[f"{name}.b"] = ad.zeros_param((dout,), f"{self.prefix}.{name}.b")
        return name

    def conv(self, name: str, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        p = self.params if params is None else params
        return ad.conv2d_same(x, p[f"{name}.w"], p[f"{name}.b"])

    def dense(self, name: str, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        p = self.params if params is None else params
        return ad.dense(x, p[f"{name}.w"], p[f"{name}.b"])

    def frozen_params(self) -> dict[str, Tensor]:
        """Constant views of the parameters: gradients flow through, not into, them."""
        return {k: Tensor(v.data) for k, v in self.params.items()}

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.{k}": v for k, v in self.params.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())


class Encoder(Network):
    """[conv, lrelu, conv, lrelu, avgpool] x blocks, then conv, lrelu, conv.

    Returns the final activation grid ``(n, channels, grid, grid)``.
    """

    def __init__(self, arch: ArchConfig, rng: Rng, in_channels: int = 1,
                 out_channels: int | None = None, prefix: str = "encoder"):
        super().__init__(prefix)
        self.arch = arch
        self.out_channels = out_channels or arch.latent_channels
        self.layers: list[str] = []
        cin = in_channels
        for i, width in enumerate(arch.widths):
            self._conv(f"b{i}c0", cin, width, rng.derive(f"{prefix}.b{i}c0"))
            self._conv(f"b{i}c1", width, width, rng.derive(f"{prefix}.b{i}c1"))
            cin = width
        self._conv("f0", cin, cin, rng.derive(f"{prefix}.f0"))
        self._conv("f1", cin, self.out_channels, rng.derive(f"{prefix}.f1"))

    def __call__(self, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        h = x
        for i in range(self.arch.blocks):
            h = ad.leaky_relu(self.conv(f"b{i}c0", h, params))
            h = ad.leaky_relu(self.conv(f"b{i}c1", h, params))
            h = ad.avg_pool2(h)
        h = ad.leaky_relu(self.conv("f0", h, params))
        return self.conv("f1", h, params)


class Decoder(Network):
    """Mirror of :class:`Encoder` with nearest-neighbour upsampling."""

    def __init__(self, arch: ArchConfig, rng: Rng, prefix: str = "decoder"):
        super().__init__(prefix)
        self.arch = arch
        cin = arch.latent_channels
        for k, width in enumerate(reversed(arch.widths)):
            self._conv(f"b{k}c0", cin, width, rng.derive(f"{prefix}.b{k}c0"))
            self._conv(f"b{k}c1", width, width, rng.derive(f"{prefix}.b{k}c1"))
            cin = width
        self._conv("f0", cin, cin, rng.derive(f"{prefix}.f0"))
        self._conv("f1", cin, arch.out_channels, rng.derive(f"{prefix}.f1"))

    def __call__(self, z: Tensor) -> Tensor:
        a = self.arch
        h = ad.reshape(z, (z.shape[0], a.latent_channels, a.grid, a.grid))
        for k in range(a.blocks):
            h = ad.leaky_relu(self.conv(f"b{k}c0", h))
            h = ad.leaky_relu(self.conv(f"b{k}c1", h))
            h = ad.upsample_nn2(h)
        h = ad.leaky_relu(self.conv("f0", h))
        return self.conv("f1", h)


class ImageCritic(Encoder):
    """Encoder-shaped network whose scalar output is the mean final activation."""

    def __init__(self, arch: ArchConfig, rng: Rng):
        super().__init__(arch, rng, in_channels=arch.out_channels, prefix="critic")

    def __call__(self, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        h = super().__call__(x, params)
        return ad.mean(ad.reshape(h, (h.shape[0], -1)), axis=1)


class LatentCritic(Network):
    """Two 100-unit leaky-ReLU dense layers and a scalar logit."""

    def __init__(self, latent_dim: int, rng: Rng, hidden: int = 100):
        super().__init__("critic")
        self._dense("d0", latent_dim, hidden, rng.derive("critic.d0"))
        self._dense("d1", hidden, hidden, rng.derive("critic.d1"))
        self._dense("out", hidden, 1, rng.derive("critic.out"))

    def __call__(self, z: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        h = ad.leaky_relu(self.dense("d0", z, params))
        h = ad.leaky_relu(self.dense("d1", h, params))
        return ad.reshape(self.dense("out", h, params), (z.shape[0],))


# ---------------------------------------------------------------------------
# vector quantisation
# ---------------------------------------------------------------------------


@dataclass
class Codebook:
    """Codebook entries with exponential-moving-average statistics."""

    entries: np.ndarray
    ema_counts: np.ndarray = field(default=None)
    ema_sums: np.ndarray = field(default=None)
    eps: float = 1e-5

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float32)
        if self.entries.ndim != 2 or len(self.entries) < 1:
            raise ConfigError("codebook entries must be a non-empty (K, dim) array")
        if self.ema_counts is None:
            self.ema_counts = np.zeros(len(self.entries), dtype=np.float32)
        if self.ema_sums is None:
            self.ema_sums = np.zeros_like(self.entries)

    @classmethod
    def random(cls, size: int, dim: int, rng: Rng) -> "Codebook":
        return cls(rng.normal((size, dim)))


def vq_nearest(vectors: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the nearest entry per row (Euclidean; ties go to the lowest index)."""
    v = vectors.astype(np.float64)
    e = entries.astype(np.float64)
    d = (v * v).sum(1)[:, None] - 2.0 * v @ e.T + (e * e).sum(1)[None, :]
    return np.argmin(d, axis=1)


def _grid_to_vectors(z: np.ndarray) -> np.ndarray:
    n, c = z.shape[:2]
    return z.reshape(n, c, -1).transpose(0, 2, 1).reshape(-1, c)


def _vectors_to_grid(v: np.ndarray, shape) -> np.ndarray:
    n, c = shape[:2]
    return v.reshape(n, -1, c).transpose(0, 2, 1).reshape(shape)


def vq_forward(z: np.ndarray, entries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantise a latent grid ``(n, c, ...)`` channel-wise.

    Returns the quantised grid and the per-position entry indices
    ``(n, positions)``.
    """
    z = np.asarray(z)
    idx = vq_nearest(_grid_to_vectors(z), entries)
    zq = _vectors_to_grid(entries[idx], z.shape).astype(z.dtype)
    return zq, idx.reshape(z.shape[0], -1)


def vq_straight_through(z: Tensor, zq: np.ndarray) -> Tensor:
    """``z + sg(zq - z)``: forward value zq, gradient passes straight to z."""
    return ad.add(z, Tensor(zq - z.data))


def vq_losses(x: Tensor, x_hat: Tensor, z: Tensor, zq: np.ndarray, beta: float) -> Tensor:
    """Reconstruction MSE plus ``beta * ||z - sg(zq)||^2`` (element mean)."""
    return ad.add(ad.mse(x_hat, x), ad.mul(ad.mse(z, Tensor(zq)), beta))


def vq_ema_update(codebook: Codebook, z: np.ndarray, indices: np.ndarray, decay: float) -> None:
    """Move counts and sums toward this batch's assignments; refresh used entries."""
    vectors = _grid_to_vectors(np.asarray(z)).astype(np.float64)
    idx = np.asarray(indices).reshape(-1)
    k = len(codebook.entries)
    counts = np.bincount(idx, minlength=k).astype(np.float64)
    sums = np.zeros((k, vectors.shape[1]))
    np.add.at(sums, idx, vectors)
    codebook.ema_counts = (decay * codebook.ema_counts + (1.0 - decay) * counts).astype(np.float32)
    codebook.ema_sums = (decay * codebook.ema_sums + (1.0 - decay) * sums).astype(np.float32)
    used = counts > 0
    denom = np.maximum(codebook.ema_counts[used].astype(np.float64), codebook.eps)
    codebook.entries[used] = (codebook.ema_sums[used] / denom[:, None]).astype(np.float32)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class AutoencoderModel:
    """Encoder, decoder and (per variant) critic or codebook."""

    def __init__(self, arch: ArchConfig, variant: ModelVariant, rng: Rng):
        self.arch = arch
        self.variant = variant
        init = rng.derive("init")
        enc_channels = 2 * arch.latent_channels if variant.kind == "vae" else arch.latent_channels
        self.encoder = Encoder(arch, init.derive("encoder"), in_channels=arch.out_channels,
                               out_channels=enc_channels)
        self.decoder = Decoder(arch, init.derive("decoder"))
        self.critic: Network | None = None
        self.codebook: Codebook | None = None
        if variant.kind == "acai":
            self.critic = ImageCritic(arch, init.derive("critic"))
        elif variant.kind == "aae":
            self.critic = LatentCritic(arch.latent_dim, init.derive("critic"))
        elif variant.kind == "vqvae":
            self.codebook = Codebook.random(variant.codebook_size, arch.latent_channels, init.derive("codebook"))

    # -- parameters --------------------------------------------------------

    def ae_parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def critic_parameters(self) -> list[Tensor]:
        return self.critic.parameters() if self.critic is not None else []

    def named_parameters(self) -> dict[str, Tensor]:
        out = {**self.encoder.named_parameters(), **self.decoder.named_parameters()}
        if self.critic is not None:
            out.update(self.critic.named_parameters())
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        if self.codebook is None:
            return {}
        return {"codebook.entries": self.codebook.entries,
                "codebook.ema_counts": self.codebook.ema_counts,
                "codebook.ema_sums": self.codebook.ema_sums}

    # -- graph-building pieces ----------------------------------------------

    def encode_graph(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        """Flat latent ``(n, latent_dim)``; for the VAE also log-sigma."""
        h = self.encoder(x)
        n = h.shape[0]
        if self.variant.kind == "vae":
            c = self.arch.latent_channels
            mu = ad.reshape(h[:, :c], (n, -1))
            log_sigma = ad.reshape(h[:, c:], (n, -1))
            return mu, log_sigma
        return ad.reshape(h, (n, -1)), None

    def decode_graph(self, z: Tensor) -> Tensor:
        out = self.decoder(z)
        return ad.sigmoid(out) if self.variant.kind == "vae" else out

    def quantize(self, z: np.ndarray) -> np.ndarray:
        grid = z.reshape(len(z), self.arch.latent_channels, self.arch.grid, self.arch.grid)
        zq, _ = vq_forward(grid, self.codebook.entries)
        return zq.reshape(len(z), -1)

    # -- numpy-facing inference --------------------------------------------

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Deterministic latent codes (the posterior mean for the VAE)."""
        x = np.asarray(x, dtype=np.float32)
        out = []
        with ad.no_grad():
            for i in range(0, len(x), EVAL_CHUNK):
                z, _ = self.encode_graph(Tensor(x[i:i + EVAL_CHUNK]))
                out.append(z.data)
        return np.concatenate(out) if out else np.zeros((0, self.arch.latent_dim), np.float32)

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Images for latent codes; VQ models snap codes to the codebook first."""
        z = np.asarray(z, dtype=np.float32)
        if self.codebook is not None:
            z = self.quantize(z)
        out = []
        with ad.no_grad():
            for i in range(0, len(z), EVAL_CHUNK):
                out.append(self.decode_graph(Tensor(z[i:i + EVAL_CHUNK])).data)
        return np.concatenate(out)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x))

    def critic_score(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.critic(Tensor(np.asarray(x, dtype=np.float32))).data


def build_encoder(arch: ArchConfig, rng: Rng) -> Encoder:
    return Encoder(arch, rng)


def build_decoder(arch: ArchConfig, rng: Rng) -> Decoder:
    return Decoder(arch, rng)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def loss_baseline(model: AutoencoderModel, x: Tensor) -> Tensor:
    z, _ = model.encode_graph(x)
    return ad.mse(model.decode_graph(z), x)


def loss_dropout(model: AutoencoderModel, x: Tensor, rng: Rng, rate: float | None = None) -> Tensor:
    rate = model.variant.dropout_rate if rate is None else rate
    z, _ = model.encode_graph(x)
    return ad.mse(model.decode_graph(ad.dropout(z, rate, rng, training=True)), x)


def corrupt(x: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    if sigma == 0:
        return x
    return (x + rng.normal(x.shape, std=sigma)).astype(x.dtype)


def loss_denoising(model: AutoencoderModel, x: Tensor, rng: Rng, sigma: float | None = None) -> Tensor:
    sigma = model.variant.noise_sigma if sigma is None else sigma
    z, _ = model.encode_graph(Tensor(corrupt(x.data, sigma, rng)))
    return ad.mse(model.decode_graph(z), x)


def loss_vae(model: AutoencoderModel, x: Tensor, rng: Rng) -> tuple[Tensor, Tensor, Tensor]:
    """Negative ELBO; returns (total, reconstruction BCE, KL)."""
    mu, log_sigma = model.encode_graph(x)
    eps = rng.normal(mu.shape)
    z = ad.add(mu, ad.mul(ad.exp(log_sigma), eps))
    recon = ad.bce(model.decode_graph(z), x, reduce="sum_per_sample")
    kl = ad.gaussian_kl(mu, log_sigma)
    return ad.add(recon, kl), recon, kl


def vae_sample(model: AutoencoderModel, rng: Rng, n: int = 1) -> np.ndarray:
    """Decode latents drawn from the N(0, I) prior."""
    return model.decode(rng.normal((n, model.arch.latent_dim)))


def aae_losses(model: AutoencoderModel, x: Tensor, rng: Rng) -> tuple[Tensor, Tensor]:
    """(autoencoder loss, critic loss) for the adversarial autoencoder.

    The critic labels prior draws 1 and encoder codes 0; the autoencoder
    uses the non-saturating objective of pushing its codes toward label 1.
    The critic loss sees detached codes, so it never reaches the encoder.
    """
    z, _ = model.encode_graph(x)
    n = z.shape[0]
    recon = ad.mse(model.decode_graph(z), x)
    fool = ad.bce_with_logits(model.critic(z, model.critic.frozen_params()), np.ones(n, dtype=np.float32))
    ae_loss = ad.add(recon, ad.mul(fool, model.variant.adversarial_weight))
    prior = rng.normal(z.shape)
    logits = model.critic(Tensor(np.concatenate([prior, z.data])))
    labels = np.concatenate([np.ones(n), np.zeros(n)]).astype(np.float32)
    return ae_loss, ad.bce_with_logits(logits, labels)


def pair_reverse(n: int) -> np.ndarray:
    """Partner index for each batch element: i pairs with n-1-i."""
    return np.arange(n)[::-1].copy()


def sample_alpha(rng: Rng, n: int) -> np.ndarray:
    return rng.uniform((n, 1), 0.0, 0.5)


def mix_latents(z1, z2, alpha):
    """``alpha * z1 + (1 - alpha) * z2`` for Tensors or arrays."""
    if isinstance(z1, Tensor) or isinstance(z2, Tensor):
        return ad.add(ad.mul(z1, alpha), ad.mul(z2, 1.0 - alpha))
    return alpha * z1 + (1.0 - alpha) * z2


def acai_interpolant(model: AutoencoderModel, x1: np.ndarray, x2: np.ndarray, alpha) -> np.ndarray:
    """Decode ``alpha * f(x1) + (1 - alpha) * f(x2)`` for alpha in [0, 0.5]."""
    a = np.asarray(alpha, dtype=np.float32)
    if np.any(a < 0) or np.any(a > 0.5):
        raise ValueError(f"alpha must lie in [0, 0.5], got {alpha}")
    z1, z2 = model.encode(x1), model.encode(x2)
    if a.ndim == 1:
        a = a[:, None]
    return model.decode(mix_latents(z1, z2, a))


def acai_critic_loss(critic, x: np.ndarray, x_alpha: np.ndarray, recon: np.ndarray,
                     alpha: np.ndarray, gamma: float) -> Tensor:
    """``||d(x_alpha) - alpha||^2 + ||d(gamma x + (1-gamma) recon)||^2``, batch means.

    All image inputs are plain arrays: the critic's loss must not move the
    autoencoder.
    """
    n = len(x)
    blend = gamma * x + (1.0 - gamma) * recon
    d = critic(Tensor(np.concatenate([x_alpha, blend]).astype(np.float32)))
    a = Tensor(np.asarray(alpha, dtype=np.float32).reshape(n))
    return ad.add(ad.mean(ad.square(ad.sub(d[:n], a))), ad.mean(ad.square(d[n:])))


def acai_ae_loss(model: AutoencoderModel, x: Tensor, alpha: np.ndarray,
                 partner: np.ndarray | None = None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """``||x - g(f(x))||^2 + lambda ||d(x_alpha)||^2``.

    Returns the loss with the decoded interpolants and reconstructions as
    plain arrays for the critic step.
    """
    n = x.shape[0]
    partner = pair_reverse(n) if partner is None else partner
    z, _ = model.encode_graph(x)
    recon = model.decode_graph(z)
    loss = ad.mse(recon, x)
    lam = model.variant.lam
    if lam > 0:
        z_mix = mix_latents(z, z[partner], alpha)
        x_alpha = model.decode_graph(z_mix)
        reg = ad.mean(ad.square(model.critic(x_alpha, model.critic.frozen_params())))
        loss = ad.add(loss, ad.mul(reg, lam))
        x_alpha_data = x_alpha.data
    else:
        with ad.no_grad():
            x_alpha_data = model.decode_graph(Tensor(mix_latents(z.data, z.data[partner], alpha))).data
    return loss, x_alpha_data, recon.data


# ---------------------------------------------------------------------------
# one optimisation step
# ---------------------------------------------------------------------------


class Optimizers:
    """Adam for the autoencoder and (when present) for the critic."""

    def __init__(self, model: AutoencoderModel, lr: float = 1e-4):
        self.ae = ad.Adam(model.ae_parameters(), lr=lr)
        self.critic = ad.Adam(model.critic_parameters(), lr=lr) if model.critic is not None else None


def _finite(name: str, t: Tensor) -> float:
    v = float(t.data)
    if not np.isfinite(v):
        raise TrainingDivergence(f"{name} is not finite ({v})")
    return v


def _zero(params) -> None:
    for p in params:
        p.grad = None


def train_step(model: AutoencoderModel, x: np.ndarray, rng: Rng, opt: Optimizers) -> dict[str, float]:
    """One update of the variant's objective(s) on batch ``x``.

    Adversarial variants compute both losses from the same pre-step
    parameters, then apply one autoencoder and one critic Adam step.
    """
    kind = model.variant.kind
    xt = Tensor(np.asarray(x, dtype=np.float32))
    ae_params = model.ae_parameters()
    critic_params = model.critic_parameters()
    record: dict[str, float] = {}
    critic_loss = None
    _zero(ae_params + critic_params)
    try:
        if kind == "baseline":
            loss = loss_baseline(model, xt)
        elif kind == "dropout":
            loss = loss_dropout(model, xt, rng.derive("dropout"))
        elif kind == "denoising":
            loss = loss_denoising(model, xt, rng.derive("noise"))
        elif kind == "vae":
            loss, recon, kl = loss_vae(model, xt, rng.derive("eps"))
            record["recon"] = _finite("reconstruction", recon)
            record["kl"] = _finite("kl", kl)
        elif kind == "vqvae":
            z, _ = model.encode_graph(xt)
            grid_shape = (len(x), model.arch.latent_channels, model.arch.grid, model.arch.grid)
            zq, idx = vq_forward(z.data.reshape(grid_shape), model.codebook.entries)
            zq = zq.reshape(z.shape)
            x_hat = model.decode_graph(vq_straight_through(z, zq))
            loss = vq_losses(xt, x_hat, z, zq, model.variant.commitment)
        elif kind == "aae":
            loss, critic_loss = aae_losses(model, xt, rng.derive("prior"))
        elif kind == "acai":
            alpha = sample_alpha(rng.derive("alpha"), len(x))
            loss, x_alpha, recon = acai_ae_loss(model, xt, alpha)
            critic_loss = acai_critic_loss(model.critic, xt.data, x_alpha, recon, alpha, model.variant.gamma)
        else:  # pragma: no cover - guarded by ModelVariant
            raise ConfigError(kind)
        record["loss"] = _finite("loss", loss)
        # the critic saw only detached inputs and the autoencoder loss only
        # frozen critic views, so each backward fills exactly one group
        loss.backward()
        ad.adam_step(ae_params, [p.grad for p in ae_params], opt.ae.state)
        if critic_loss is not None:
            record["critic_loss"] = _finite("critic loss", critic_loss)
            critic_loss.backward()
            ad.adam_step(critic_params, [p.grad for p in critic_params], opt.critic.state)
        if kind == "vqvae":
            vq_ema_update(model.codebook, z.data.reshape(grid_shape), idx, model.variant.ema_decay)
    except FloatingPointError as exc:
        if isinstance(exc, TrainingDivergence):
            raise
        raise TrainingDivergence(str(exc)) from exc
    finally:
        _zero(ae_params + critic_params)
    return record


def with_variant(variant: ModelVariant, **changes) -> ModelVariant:
    return replace(variant, **changes)
