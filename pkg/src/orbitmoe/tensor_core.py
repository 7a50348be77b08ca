"""Dense tensor primitives with explicit forward/backward pairs.

Tensors are plain numpy arrays (row-major). Training code runs in float32,
numerical tests in float64; every op preserves the dtype of its inputs.
Each primitive comes as ``op(...)`` returning ``(out, cache)`` plus a matching
``op_backward(grad, cache)`` that returns analytic input gradients. There is
no tape: the model is a fixed pipeline, so each layer owns its cache.

All functions here are pure; they can be called concurrently on disjoint
arrays.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Rng",
    "assert_finite",
    "matmul",
    "matmul_backward",
    "gelu",
    "gelu_backward",
    "layer_norm",
    "layer_norm_backward",
    "softmax",
    "softmax_cross_entropy",
    "softmax_cross_entropy_backward",
    "gaussian",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def assert_finite(x: np.ndarray, name: str = "tensor") -> None:
    """Debug check: every element must be finite (no NaN/Inf)."""
    if not np.all(np.isfinite(x)):
        bad = np.size(x) - int(np.isfinite(x).sum())
        raise FloatingPointError(f"{name} contains {bad} non-finite element(s)")


class Rng:
    """Deterministic, splittable random source.

    Backed by numpy's Philox counter-based bit generator: the same seed
    always yields the same draw sequence, and ``split()`` derives an
    independent child stream (children are spawned from the parent's
    SeedSequence, so the k-th split of a given seed is itself reproducible).
    """

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed) if _seq is None else _seq
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self) -> "Rng":
        """Return a new Rng with a stream independent of this one."""
        (child,) = self._seq.spawn(1)
        return Rng(self.seed, _seq=child)

    def normal(self, shape, mean=0.0, std=1.0, dtype=np.float64) -> np.ndarray:
        return gaussian(self, shape, mean, std, dtype=dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float64) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)


def gaussian(rng: Rng, shape, mean: float = 0.0, std: float = 1.0,
             dtype=np.float64) -> np.ndarray:
    """I.i.d. normal draws, deterministic per seed. ``std`` must be >= 0."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    out = rng._gen.normal(loc=mean, scale=std, size=shape)
    return np.asarray(out, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray):
    """Matrix product a @ b with cached operands for the backward pass."""
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} vs {b.shape}")
    return a @ b, (a, b)


def matmul_backward(grad: np.ndarray, cache):
    """Gradients of a @ b: (grad @ b^T, a^T @ grad)."""
    a, b = cache
    return grad @ b.T, a.T @ grad


def gelu(x: np.ndarray):
    """Exact Gaussian-CDF GELU, x * Phi(x) (erf form, not tanh)."""
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * phi, (x, phi)


def gelu_backward(grad: np.ndarray, cache):
    """d/dx [x * Phi(x)] = Phi(x) + x * pdf(x)."""
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return grad * (phi + x * pdf)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = LAYER_NORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] < 2:
        raise ShapeError(f"layer_norm needs a last axis >= 2, got {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm_backward(grad: np.ndarray, cache):
    """Returns (grad_x, grad_gain, grad_bias)."""
    xhat, inv_std, gain = cache
    d = xhat.shape[-1]
    g = grad * gain
    # standard reduction: remove the mean and the xhat-projected component
    gx = (g - g.mean(axis=-1, keepdims=True)
          - xhat * np.mean(g * xhat, axis=-1, keepdims=True)) * inv_std
    axes = tuple(range(grad.ndim - 1))
    return gx, np.sum(grad * xhat, axis=axes), np.sum(grad, axis=axes)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stabilized softmax (max-subtraction)."""
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          label_smoothing: float = 0.0):
    """Mean negative log-likelihood over the batch.

    ``logits`` is [B, C]; ``labels`` holds integer class ids in [0, C).
    With ``label_smoothing`` = s the target distribution becomes
    (1 - s) * one_hot + s / C.
    """
    labels = np.asarray(labels)
    n_classes = logits.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= n_classes:
        raise IndexError(
            f"label out of range [0, {n_classes}): {labels.min()}..{labels.max()}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    nll = -log_probs[np.arange(len(labels)), labels]
    if label_smoothing:
        uniform = -log_probs.mean(axis=1)
        nll = (1.0 - label_smoothing) * nll + label_smoothing * uniform
    probs = softmax(logits, axis=1)
    return float(nll.mean()), (probs, labels, label_smoothing)


def softmax_cross_entropy_backward(cache, grad: float = 1.0) -> np.ndarray:
    """Gradient wrt logits: (softmax - target) / B, scaled by ``grad``."""
    probs, labels, label_smoothing = cache
    gz = probs.copy()
    rows = np.arange(len(labels))
    if label_smoothing:
        gz -= label_smoothing / probs.shape[1]
        gz[rows, labels] -= 1.0 - label_smoothing
    else:
        gz[rows, labels] -= 1.0
    gz *= grad / len(labels)
    return gz
