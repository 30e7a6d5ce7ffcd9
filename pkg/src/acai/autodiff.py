"""A small reverse-mode automatic differentiation engine on numpy arrays.

Only the operations needed by the convolutional autoencoders are provided:
same-padded 3x3 convolution, 2x2 average pooling, nearest-neighbour
upsampling, dense layers, leaky ReLU / sigmoid, dropout, the reconstruction
and divergence losses, and a handful of elementwise helpers.

Tensors default to float32.  float64 inputs are carried through unchanged,
which is what the finite-difference checker relies on.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import _kernels
from .rng import Rng

DTYPE = np.float32
LEAKY_SLOPE = 0.2
BCE_CLAMP = 1e-7
# below this many pixels per map, im2col + BLAS beats the direct loops
DIRECT_CONV_MIN_AREA = 64


_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Forward passes inside this block record no graph."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class ConfigError(ValueError):
    """An operation or model was configured with invalid hyperparameters."""


class Tensor:
    """n-dimensional array with an optional gradient buffer.

    ``parents`` and ``backward_fn`` are filled in by the operations below; a
    tensor built directly by the user is a leaf.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(DTYPE, copy=False)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording the graph edge only if someone needs grads."""
    if not np.isfinite(data).all():
        raise FloatingPointError("non-finite values produced in forward pass")
    out = Tensor(data)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # interior grads live here; leaves keep theirs on the tensor
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accumulate(parent, pg)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)

    return _node(np.asarray(x.data.mean(axis=axis), dtype=x.data.dtype), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.ascontiguousarray(x.data[idx]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward, zero gradient backward."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def conv2d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded 3x3 convolution (cross-correlation), NCHW layout."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d_same expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"kernel must be 3x3, got {kh}x{kw}")
    if kcin != cin:
        raise ShapeError(f"input has {cin} channels but kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")

    if h * w >= DIRECT_CONV_MIN_AREA:
        return _conv_direct(x, kernel, bias)
    return _conv_im2col(x, kernel, bias)


def _conv_direct(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    n, cin, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    kdata = np.ascontiguousarray(kernel.data, dtype=x.data.dtype)
    y = np.empty((n, kernel.shape[0], h, w), dtype=x.data.dtype)
    _kernels.conv3x3_forward(xp, kdata, bias.data.astype(x.data.dtype), y)

    def bw(g):
        g = np.ascontiguousarray(g)
        dk = dx = None
        if kernel.requires_grad:
            dk = np.empty_like(kdata)
            _kernels.conv3x3_grad_kernel(xp, g, dk)
        db = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            _kernels.conv3x3_grad_input(g, kdata, dxp)
            dx = dxp[:, :, 1:-1, 1:-1]
        return dx, dk, db

    return _node(y, (x, kernel, bias), bw)


def _conv_im2col(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    n, cin, h, w = x.shape
    cout = kernel.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # columns laid out (tap, cin, n, h, w) so each tap is one strided block copy
    cols = np.empty((9, cin, n, h, w), dtype=x.data.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        cols[k] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    cols = cols.reshape(9 * cin, n * h * w)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, 9 * cin)
    out = wmat @ cols
    out += bias.data[:, None]
    y = np.ascontiguousarray(out.reshape(cout, n, h, w).transpose(1, 0, 2, 3))

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * h * w)
        dk = None
        if kernel.requires_grad:
            dk = (gt @ cols.T).reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2)
        db = gt.sum(axis=1) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(9, cin, n, h, w)
            dxp = np.zeros((n, cin, h + 2, w + 2), dtype=g.dtype)
            for k in range(9):
                i, j = divmod(k, 3)
                dxp[:, :, i:i + h, j:j + w] += dcols[k].transpose(1, 0, 2, 3)
            dx = dxp[:, :, 1:-1, 1:-1]
        return dx, dk, db

    return _node(y, (x, kernel, bias), bw)


def avg_pool2(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 blocks."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    y = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3),)

    return _node(y, (x,), bw)


def upsample_nn2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(y, (x,), bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    y = x.data @ weight.data.T + bias.data

    def bw(g):
        return (g @ weight.data if x.requires_grad else None,
                g.T @ x.data if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return _node(y, (x, weight, bias), bw)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _node(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind in ("leaky_relu", "leaky_relu_0.2"):
        return leaky_relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, rng: Rng | None, training: bool = True) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.bernoulli(1.0 - rate, x.shape)
    scale = (keep / (1.0 - rate)).astype(x.data.dtype)
    return _node(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_same(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = as_tensor(target)
    _check_same(pred, target)
    diff = pred.data - target.data
    n = diff.size
    val = np.asarray(np.mean(diff * diff), dtype=pred.data.dtype)
    return _node(val, (pred, target), lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


def bce(pred: Tensor, target, reduce: str = "mean") -> Tensor:
    """Binary cross-entropy of probabilities ``pred`` against ``target``.

    ``reduce="mean"`` averages over all elements; ``"sum_per_sample"`` sums
    over all non-batch axes and averages over the batch.
    """
    target = as_tensor(target)
    _check_same(pred, target)
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target.data
    ll = t * np.log(p) + (1.0 - t) * np.log1p(-p)
    denom = ll.size if reduce == "mean" else ll.shape[0]
    if reduce not in ("mean", "sum_per_sample"):
        raise ConfigError(f"unknown reduction {reduce!r}")
    val = np.asarray(-ll.sum() / denom, dtype=pred.data.dtype)
    inside = (pred.data > BCE_CLAMP) & (pred.data < 1.0 - BCE_CLAMP)

    def bw(g):
        dp = g * (p - t) / (p * (1.0 - p)) / denom * inside
        return dp, None

    return _node(val, (pred, target), bw)


def losses(pred: Tensor, target, kind: str) -> Tensor:
    if kind == "mse":
        return mse(pred, target)
    if kind == "bce":
        return bce(pred, target)
    raise ConfigError(f"unknown loss {kind!r}")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean logistic loss; numerically stable in the logit."""
    target = as_tensor(target)
    _check_same(logits, target)
    z, t = logits.data, target.data
    val = np.asarray(np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))), dtype=z.dtype)
    n = z.size

    def bw(g):
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return g * (s - t) / n, None

    return _node(val, (logits, target), bw)


def gaussian_kl(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over dims, averaged over batch."""
    _check_same(mu, log_sigma)
    var = np.exp(2.0 * log_sigma.data)
    per = 0.5 * (mu.data ** 2 + var - 1.0 - 2.0 * log_sigma.data)
    b = mu.shape[0] if mu.ndim > 1 else 1
    val = np.asarray(per.sum() / b, dtype=mu.data.dtype)
    return _node(val, (mu, log_sigma), lambda g: (g * mu.data / b, g * (var - 1.0) / b))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    val = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    def bw(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return _node(val, (logits,), bw)


# ---------------------------------------------------------------------------
# initialisation and optimisation
# ---------------------------------------------------------------------------


def init_std(fan_in: int, slope: float = LEAKY_SLOPE) -> float:
    return 1.0 / np.sqrt(fan_in * (1.0 + slope ** 2))


def init_conv_params(fan_in: int, shape, rng: Rng, name: str | None = None) -> Tensor:
    """Zero-mean Gaussian weights scaled for a leaky-ReLU fan-in."""
    if fan_in <= 0:
        raise ConfigError("fan_in must be positive")
    return Tensor(rng.normal(shape, std=init_std(fan_in)), requires_grad=True, name=name)


def zeros_param(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=True, name=name)


class AdamState:
    """Moment buffers and step counter for one parameter group."""

    def __init__(self, shapes: Iterable[tuple[int, ...]], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step = 0
        self.m = [np.zeros(s, dtype=DTYPE) for s in shapes]
        self.v = [np.zeros(s, dtype=DTYPE) for s in shapes]


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place; missing grads count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)


class Adam:
    """Optimizer bound to a fixed list of parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState([p.shape for p in self.params], lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
