"""Central finite-difference checks for every differentiable op.

Each case builds small float64 inputs (at most 64 elements each), projects
the op's output onto fixed random weights to get a scalar, and compares the
analytic gradient of every input with ``(f(x + h) - f(x - h)) / 2h``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng

STEP = 1e-3
TOLERANCE = 1e-3


@dataclass(frozen=True)
class GradCase:
    name: str
    make_inputs: Callable[[Rng], list[np.ndarray]]
    fn: Callable[..., Tensor]


@dataclass(frozen=True)
class GradResult:
    name: str
    error: float
    passed: bool

    def line(self) -> str:
        return f"{self.name}={self.error:.3e} {'ok' if self.passed else 'FAIL'}"


def _normal(*shape):
    return lambda rng: rng.normal(shape, dtype=np.float64)


def _away_from_zero(*shape):
    """Values with magnitude at least 0.1, so kinks sit outside the stencil."""
    def make(rng):
        u = rng.uniform(shape, 0.1, 1.5, dtype=np.float64)
        return u * np.where(rng.bernoulli(0.5, shape), 1.0, -1.0)
    return make


def _inputs(*makers):
    return lambda rng: [m(rng.derive("input", i)) for i, m in enumerate(makers)]


def _dropout(x):
    return ad.dropout(x, 0.5, Rng(3), training=True)


def _probs(*shape):
    return lambda rng: rng.uniform(shape, 0.1, 0.9, dtype=np.float64)


# targets are constants, not differentiated inputs
_LABELS = np.array([0, 2, 1, 2])
_TARGET_34 = Tensor(Rng(1).uniform((3, 4), dtype=np.float64))
_TARGET_8 = Tensor(Rng(2).uniform((8,), dtype=np.float64))

CASES: tuple[GradCase, ...] = (
    GradCase("add_broadcast", _inputs(_normal(4, 5), _normal(1, 5)), ad.add),
    GradCase("sub", _inputs(_normal(3, 4), _normal(3, 4)), ad.sub),
    GradCase("mul_broadcast", _inputs(_normal(2, 3, 4), _normal(4)), ad.mul),
    GradCase("square", _inputs(_normal(16)), ad.square),
    GradCase("exp", _inputs(_normal(16)), ad.exp),
    GradCase("log", _inputs(lambda r: r.uniform((16,), 0.5, 2.0, dtype=np.float64)), ad.log),
    GradCase("sum_axis", _inputs(_normal(3, 4, 2)), lambda x: ad.sum(x, axis=1)),
    GradCase("mean_all", _inputs(_normal(3, 4)), ad.mean),
    GradCase("reshape", _inputs(_normal(2, 6)), lambda x: ad.reshape(x, (3, 4))),
    GradCase("transpose", _inputs(_normal(2, 3, 4)), lambda x: ad.transpose(x, (2, 0, 1))),
    GradCase("index", _inputs(_normal(4, 6)), lambda x: x[1:3, ::2]),
    GradCase("concat", _inputs(_normal(2, 3), _normal(2, 5)), lambda a, b: ad.concat([a, b], axis=1)),
    GradCase("conv2d_small_map", _inputs(_normal(2, 2, 4, 4), _normal(3, 2, 3, 3), _normal(3)), ad.conv2d_same),
    GradCase("conv2d_large_map", _inputs(_normal(1, 1, 8, 8), _normal(2, 1, 3, 3), _normal(2)), ad.conv2d_same),
    GradCase("avg_pool2", _inputs(_normal(1, 2, 4, 4)), ad.avg_pool2),
    GradCase("upsample_nn2", _inputs(_normal(1, 2, 2, 3)), ad.upsample_nn2),
    GradCase("dense", _inputs(_normal(4, 5), _normal(3, 5), _normal(3)), ad.dense),
    GradCase("leaky_relu", _inputs(_away_from_zero(24)), ad.leaky_relu),
    GradCase("sigmoid", _inputs(_normal(24)), ad.sigmoid),
    GradCase("dropout", _inputs(_normal(24)), _dropout),
    GradCase("mse", _inputs(_normal(3, 4), _normal(3, 4)), ad.mse),
    GradCase("bce_mean", _inputs(_probs(3, 4)), lambda p: ad.bce(p, _TARGET_34)),
    GradCase("bce_sum_per_sample", _inputs(_probs(3, 4)),
             lambda p: ad.bce(p, _TARGET_34, reduce="sum_per_sample")),
    GradCase("bce_with_logits", _inputs(_normal(8)), lambda z: ad.bce_with_logits(z, _TARGET_8)),
    GradCase("gaussian_kl", _inputs(_normal(3, 4), lambda r: 0.5 * r.normal((3, 4), dtype=np.float64)),
             ad.gaussian_kl),
    GradCase("softmax_cross_entropy", _inputs(_normal(4, 3)), lambda z: ad.softmax_cross_entropy(z, _LABELS)),
)


def _scalar(fn, arrays, weights_rng: Rng):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = weights_rng.normal(out.shape, dtype=np.float64)
    loss = ad.sum(ad.mul(out, Tensor(w))) if out.size > 1 else ad.mul(out, Tensor(np.asarray(1.0)))
    return loss, tensors


def check_case(case: GradCase, seed: int = 0, h: float = STEP, tol: float = TOLERANCE) -> GradResult:
    """Worst norm-relative gradient error over the case's inputs."""
    rng = Rng(seed).derive(case.name)
    arrays = [np.asarray(a, dtype=np.float64) for a in case.make_inputs(rng)]
    loss, tensors = _scalar(case.fn, arrays, rng.derive("weights"))
    loss.backward()
    worst = 0.0
    for i, (a, t) in enumerate(zip(arrays, tensors)):
        analytic = np.zeros_like(a) if t.grad is None else t.grad
        numeric = np.zeros_like(a)
        for j in np.ndindex(a.shape):
            vals = []
            for sign in (1.0, -1.0):
                shifted = [b.copy() for b in arrays]
                shifted[i][j] += sign * h
                with ad.no_grad():
                    vals.append(float(_scalar(case.fn, shifted, rng.derive("weights"))[0].data))
            numeric[j] = (vals[0] - vals[1]) / (2.0 * h)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return GradResult(case.name, worst, worst <= tol)


def run_suite(seed: int = 0, cases=CASES) -> list[GradResult]:
    return [check_case(c, seed) for c in cases]
