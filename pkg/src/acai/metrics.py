"""Mean Distance and Smoothness of latent interpolations on the lines benchmark."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

from .autodiff import ConfigError
from .lines import TWO_PI, ReferenceSet, build_reference_set, render_batch
from .rng import Rng

NORM_FLOOR = 1e-8
SPAN_FLOOR = 1e-6

DEFAULT_STEPS = 16
DEFAULT_REFS = 4096
DEFAULT_PAIRS = 256


class EvaluationError(RuntimeError):
    """No interpolation produced a usable score."""


class Interpolator(Protocol):
    def encode(self, x: np.ndarray) -> np.ndarray: ...

    def decode(self, z: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class InterpolationGrid:
    steps: np.ndarray  # (N, 1, 32, 32), clamped to [0, 1]
    alphas: np.ndarray  # (N,)


@dataclass
class MetricsReport:
    mean_distance: float
    smoothness: float
    n_pairs: int
    N: int
    D: int
    skipped_pairs: int = 0
    degenerate_images: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        """``key=value`` record, one field per line."""
        return "\n".join(f"{k}={_fmt(v)}" for k, v in self.as_dict().items()) + "\n"

    def summary_line(self) -> str:
        return f"mean_distance={_fmt(self.mean_distance)} smoothness={_fmt(self.smoothness)}"


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def interpolation_alphas(N: int) -> np.ndarray:
    if N < 2:
        raise ConfigError(f"an interpolation needs N >= 2 steps, got {N}")
    return np.arange(N, dtype=np.float64) / (N - 1)


def build_interpolation(model: Interpolator, x1: np.ndarray, x2: np.ndarray, N: int) -> InterpolationGrid:
    """Decode ``a_n z1 + (1 - a_n) z2`` for ``a_n = (n-1)/(N-1)``.

    Step 1 therefore decodes ``z2`` and step N decodes ``z1``.
    """
    alphas = interpolation_alphas(N)
    z = model.encode(np.stack([np.asarray(x1), np.asarray(x2)]).astype(np.float32))
    a = alphas[:, None].astype(np.float32)
    mixed = a * z[0][None, :] + (1.0 - a) * z[1][None, :]
    steps = np.clip(model.decode(mixed), 0.0, 1.0)
    return InterpolationGrid(steps=steps, alphas=alphas)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """``1 - <a, b> / (|a| |b|)``; 1.0 when either norm is below 1e-8."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 1.0
    return float(np.clip(1.0 - a @ b / (na * nb), 0.0, 2.0))


def match_references(images: np.ndarray, refs: ReferenceSet) -> tuple[np.ndarray, np.ndarray, int]:
    """Nearest reference per image by cosine distance.

    Returns ``(indices, distances, n_degenerate)``; zero-norm images score
    distance 1.0 and match index 0.  Ties go to the lowest index.
    """
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    norms = np.linalg.norm(flat, axis=1)
    degenerate = norms < NORM_FLOOR
    unit = flat / np.where(degenerate, 1.0, norms)[:, None]
    sims = unit @ refs.unit_rows.T
    idx = np.argmax(sims, axis=1)
    dist = np.clip(1.0 - sims[np.arange(len(flat)), idx], 0.0, 2.0)
    idx[degenerate] = 0
    dist[degenerate] = 1.0
    return idx, dist, int(degenerate.sum())


def nearest_reference(image: np.ndarray, refs: ReferenceSet) -> tuple[int, float]:
    idx, dist, _ = match_references(np.asarray(image)[None], refs)
    return int(idx[0]), float(dist[0])


def unwrap_angles(angles) -> np.ndarray:
    """Shift by multiples of 2*pi so consecutive jumps are at most pi."""
    a = np.asarray(angles, dtype=np.float64)
    if a.size == 0:
        raise ValueError("unwrap needs at least one angle")
    out = a.copy()
    offset = 0.0
    for i in range(1, len(a)):
        diff = a[i] - a[i - 1]
        if diff > np.pi:
            offset -= TWO_PI * np.ceil((diff - np.pi) / TWO_PI)
        elif diff < -np.pi:
            offset += TWO_PI * np.ceil((-diff - np.pi) / TWO_PI)
        out[i] = a[i] + offset
    return out


def mean_distance(distances) -> float:
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("mean_distance needs at least one value")
    return float(d.mean())


def smoothness(matched_angles) -> float | None:
    """Largest normalised angle step in excess of the uniform step 1/(N-1).

    Steps are taken in absolute value so decreasing trajectories score like
    increasing ones.  Returns None when the unwrapped start and end coincide.
    """
    a = unwrap_angles(matched_angles)
    if len(a) < 2:
        raise ConfigError("smoothness needs at least two angles")
    span = abs(a[0] - a[-1])
    if span < SPAN_FLOOR:
        return None
    return float(np.max(np.abs(np.diff(a))) / span - 1.0 / (len(a) - 1))


def score_interpolation(steps: np.ndarray, refs: ReferenceSet) -> tuple[float, float | None, int]:
    """(Mean Distance, Smoothness or None, degenerate-image count) for one path."""
    idx, dist, n_bad = match_references(steps, refs)
    return mean_distance(dist), smoothness(refs.angles[idx]), n_bad


def sample_test_pairs(rng: Rng, n_pairs: int) -> tuple[np.ndarray, np.ndarray]:
    """Independent uniform angle pairs ``(n_pairs, 2)`` and their renders."""
    if n_pairs < 1:
        raise ConfigError("need at least one test pair")
    angles = rng.uniform((n_pairs, 2), 0.0, TWO_PI, dtype=np.float64)
    return angles, render_batch(angles.ravel()).reshape(n_pairs, 2, 1, 32, 32)


def evaluate_pairs(model: Interpolator, pairs: np.ndarray, N: int, refs: ReferenceSet) -> MetricsReport:
    """Score interpolations for an ``(n_pairs, 2, 1, 32, 32)`` stack of endpoints."""
    pairs = np.asarray(pairs, dtype=np.float32)
    n_pairs = len(pairs)
    alphas = interpolation_alphas(N).astype(np.float32)[:, None]
    z = model.encode(pairs.reshape(2 * n_pairs, *pairs.shape[2:]))
    z1, z2 = z[0::2], z[1::2]
    mixed = alphas[None] * z1[:, None, :] + (1.0 - alphas[None]) * z2[:, None, :]
    decoded = np.clip(model.decode(mixed.reshape(n_pairs * N, -1)), 0.0, 1.0)
    decoded = decoded.reshape(n_pairs, N, -1)

    dists, smooths = [], []
    skipped = degenerate = 0
    for p in range(n_pairs):
        md, sm, n_bad = score_interpolation(decoded[p], refs)
        dists.append(md)
        degenerate += n_bad
        if sm is None:
            skipped += 1
        else:
            smooths.append(sm)
    if not smooths:
        raise EvaluationError(f"all {n_pairs} interpolations had a degenerate angle span")
    return MetricsReport(mean_distance=float(np.mean(dists)), smoothness=float(np.mean(smooths)),
                         n_pairs=n_pairs, N=N, D=len(refs), skipped_pairs=skipped,
                         degenerate_images=degenerate)


def evaluate_lines(model: Interpolator, rng: Rng, n_pairs: int = DEFAULT_PAIRS,
                   N: int = DEFAULT_STEPS, D: int = DEFAULT_REFS) -> MetricsReport:
    """Interpolate between random test lines and score against ``D`` references."""
    _, pairs = sample_test_pairs(rng, n_pairs)
    return evaluate_pairs(model, pairs, N, build_reference_set(D))
