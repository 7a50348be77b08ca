"""Butterfly rotation layers: stacked Givens stages + perfect shuffles.

A rotation of logical width ``d`` is parameterized by ``n_layers`` stages of
per-pair 2D Givens angles over the padded width ``d_pad`` (next power of two
>= d). Each stage rotates channel pairs (2j, 2j+1) and then applies the fixed
riffle permutation ``out[2j] = x[j], out[2j+1] = x[j + d_pad/2]``. The shuffle
runs after every stage, including the last, so the zero-angle transform is a
data-independent permutation rather than the identity.

Widths that are not powers of two are zero-padded on entry and the trailing
``d_pad - d`` columns are stripped on exit; pairs that only ever touch padded
lanes receive zero gradient. For power-of-two widths the transform is exactly
orthogonal; with stripping it is norm non-increasing.
"""

from __future__ import annotations

import numpy as np

from .tensor_core import ShapeError

__all__ = ["ButterflyAngles", "next_pow2", "perfect_shuffle",
           "inverse_shuffle", "butterfly_forward", "butterfly_backward",
           "materialize"]


def next_pow2(d: int) -> int:
    """Smallest power of two >= d."""
    if d < 1:
        raise ValueError(f"width must be >= 1, got {d}")
    return 1 << (d - 1).bit_length()


class ButterflyAngles:
    """Learnable Givens angles for one rotation.

    ``angles`` has shape [n_layers, padded_dim // 2]; entry (l, j) rotates the
    channel pair (2j, 2j+1) in stage l.
    """

    def __init__(self, dim: int, n_layers: int = 2, angles: np.ndarray | None = None,
                 dtype=np.float64):
        if dim < 2:
            raise ValueError(f"rotation width must be >= 2, got {dim}")
        if n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {n_layers}")
        self.dim = int(dim)
        self.n_layers = int(n_layers)
        self.padded_dim = next_pow2(self.dim)
        shape = (self.n_layers, self.padded_dim // 2)
        if angles is None:
            self.angles = np.zeros(shape, dtype=dtype)
        else:
            angles = np.asarray(angles, dtype=dtype)
            if angles.shape != shape:
                raise ShapeError(
                    f"angles must have shape {shape}, got {angles.shape}")
            self.angles = angles

    @property
    def n_params(self) -> int:
        return self.angles.size

    def __repr__(self):
        return (f"ButterflyAngles(dim={self.dim}, n_layers={self.n_layers}, "
                f"padded_dim={self.padded_dim})")


def perfect_shuffle(x: np.ndarray) -> np.ndarray:
    """Riffle the halves of the last axis: out[2j]=x[j], out[2j+1]=x[j+d/2]."""
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"perfect_shuffle needs an even width, got {d}")
    half = d // 2
    out = np.empty_like(x)
    out[..., 0::2] = x[..., :half]
    out[..., 1::2] = x[..., half:]
    return out


def inverse_shuffle(x: np.ndarray) -> np.ndarray:
    """Undo perfect_shuffle: gather even lanes then odd lanes."""
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"inverse_shuffle needs an even width, got {d}")
    return np.concatenate([x[..., 0::2], x[..., 1::2]], axis=-1)


def butterfly_forward(x: np.ndarray, ba: ButterflyAngles):
    """Apply the rotation to rows of x ([N, d] -> [N, d]).

    Returns (out, cache); the cache holds each stage's pre-rotation pair
    values for the analytic backward pass.
    """
    n, d = x.shape
    if d != ba.dim:
        raise ShapeError(f"input width {d} != rotation width {ba.dim}")
    dp = ba.padded_dim
    if dp > d:
        buf = np.zeros((n, dp), dtype=x.dtype)
        buf[:, :d] = x
        x = buf
    stages = []
    for l in range(ba.n_layers):
        a = ba.angles[l].astype(x.dtype, copy=False)
        c, s = np.cos(a), np.sin(a)
        even = x[:, 0::2]
        odd = x[:, 1::2]
        stages.append((even, odd))
        rot = np.empty_like(x)
        rot[:, 0::2] = c * even - s * odd
        rot[:, 1::2] = s * even + c * odd
        x = perfect_shuffle(rot)
    cache = (ba, stages)
    return x[:, :d] if dp > d else x, cache


def butterfly_backward(grad_out: np.ndarray, cache):
    """Exact gradients for the input and every angle.

    Returns (grad_x [N, d], grad_angles [n_layers, padded_dim/2]).
    """
    ba, stages = cache
    if len(stages) != ba.n_layers:
        raise RuntimeError("cache does not match this rotation's stage count")
    n, d = grad_out.shape
    dp = ba.padded_dim
    if dp > d:
        buf = np.zeros((n, dp), dtype=grad_out.dtype)
        buf[:, :d] = grad_out
        g = buf
    else:
        g = grad_out
    grad_angles = np.zeros_like(ba.angles)
    for l in range(ba.n_layers - 1, -1, -1):
        g = inverse_shuffle(g)
        ge = g[:, 0::2]
        go = g[:, 1::2]
        a = ba.angles[l].astype(g.dtype, copy=False)
        c, s = np.cos(a), np.sin(a)
        even, odd = stages[l]
        # rot_even = c*even - s*odd, rot_odd = s*even + c*odd
        grad_angles[l] = np.sum(ge * (-s * even - c * odd)
                                + go * (c * even - s * odd), axis=0)
        back = np.empty_like(g)
        back[:, 0::2] = c * ge + s * go
        back[:, 1::2] = -s * ge + c * go
        g = back
    return (g[:, :d] if dp > d else g), grad_angles


def materialize(ba: ButterflyAngles) -> np.ndarray:
    """Dense d x d matrix B with B @ v == butterfly_forward(v row) for all v.

    Built by pushing the standard basis through the forward pass; test and
    analysis utility only, never used on the training path.
    """
    basis = np.eye(ba.dim, dtype=ba.angles.dtype)
    out, _ = butterfly_forward(basis, ba)
    return out.T
