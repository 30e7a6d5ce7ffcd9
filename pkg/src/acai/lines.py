"""Synthetic line images: 16-px radii of a 32x32 grid at arbitrary angles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ConfigError
from .rng import Rng

SIZE = 32
LENGTH = 16.0
HALF_WIDTH = 0.5
CENTER = (SIZE - 1) / 2.0
TWO_PI = 2.0 * np.pi

_OFFSETS = np.arange(SIZE, dtype=np.float64) - CENTER


def _snap(v: float) -> float:
    if abs(v) < 1e-12:
        return 0.0
    if abs(abs(v) - 1.0) < 1e-12:
        return float(np.sign(v))
    return v


def _render_octant(dx: float, dy: float) -> np.ndarray:
    """Segment toward (dx, dy) with 0 <= dy <= dx; array indexed [up, right]."""
    px = _OFFSETS[None, :]
    py = _OFFSETS[:, None]
    t = np.clip(px * dx + py * dy, 0.0, LENGTH)
    d2 = (px - t * dx) ** 2 + (py - t * dy) ** 2
    return d2 <= HALF_WIDTH * HALF_WIDTH


def render_line(angle: float) -> np.ndarray:
    """Binary 32x32 image of a line from the centre at ``angle`` radians.

    Angles are counter-clockwise from +x; row 0 is the top.  The first
    octant is rasterised once and the other seven are exact grid symmetries
    of it, so mirrored and rotated angles give bit-identical images.
    """
    if not np.isfinite(angle):
        raise ValueError(f"angle must be finite, got {angle}")
    a = float(np.mod(angle, TWO_PI))
    c, s = _snap(np.cos(a)), _snap(np.sin(a))
    dx, dy = abs(c), abs(s)
    swap = dy > dx
    if swap:
        dx, dy = dy, dx
    img = _render_octant(dx, dy)
    if swap:
        img = img.T
    if c < 0:
        img = img[:, ::-1]
    if s < 0:
        img = img[::-1, :]
    # [up, right] -> [row, col]
    return np.ascontiguousarray(img[::-1, :]).astype(np.float32)


def render_batch(angles) -> np.ndarray:
    """Stack renders into an (n, 1, 32, 32) float32 batch."""
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    out = np.empty((len(angles), 1, SIZE, SIZE), dtype=np.float32)
    for i, a in enumerate(angles):
        out[i, 0] = render_line(a)
    return out


def sample_batch(rng: Rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` line images with angles uniform on [0, 2*pi)."""
    if n < 1:
        raise ConfigError("batch size must be at least 1")
    angles = rng.uniform(n, 0.0, TWO_PI, dtype=np.float64)
    return render_batch(angles), angles


@dataclass(frozen=True)
class ReferenceSet:
    """Evenly spaced line images used to match decoded interpolants."""

    images: np.ndarray
    angles: np.ndarray

    def __len__(self) -> int:
        return len(self.angles)

    @property
    def unit_rows(self) -> np.ndarray:
        """Flattened images scaled to unit L2 norm, shape (D, 1024)."""
        flat = self.images.reshape(len(self), -1).astype(np.float64)
        return flat / np.linalg.norm(flat, axis=1, keepdims=True)


_REF_CACHE: dict[int, ReferenceSet] = {}


def build_reference_set(D: int) -> ReferenceSet:
    """``D`` renders at angles ``2*pi*q/D``."""
    if D < 2:
        raise ConfigError(f"reference set needs D >= 2, got {D}")
    cached = _REF_CACHE.get(D)
    if cached is None:
        angles = TWO_PI * np.arange(D, dtype=np.float64) / D
        images = render_batch(angles)
        images.setflags(write=False)
        angles.setflags(write=False)
        cached = ReferenceSet(images=images, angles=angles)
        _REF_CACHE[D] = cached
    return cached
