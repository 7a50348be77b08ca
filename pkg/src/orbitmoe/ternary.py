"""Shared ternary weight substrate: AbsMean quantization, straight-through
gradients, ternary matrix application, and bit-packed serialization.

The latent substrate is a full-precision master matrix. Quantization maps it
to trits {-1, 0, +1} plus one scale gamma (the mean absolute value), giving an
effective weight grid {-gamma, 0, +gamma}. On disk trits are packed five per
byte in base 3 (1.6 bits/weight); in memory they are one signed byte each —
the 1.58 bits/weight figure is an accounting number, not the compute layout.

``TernaryMatrix`` is immutable after construction and safe to share across
threads; only the optimizer mutates the latent master copy.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor_core import ShapeError

__all__ = ["TernaryMatrix", "FormatError", "absmean_quantize", "ste_backward",
           "ternary_apply", "ternary_apply_backward", "pack", "unpack",
           "ABSMEAN_EPS"]

ABSMEAN_EPS = 1e-8

MAGIC = b"BVTS"
FORMAT_VERSION = 1
# little-endian: magic, version u16, rows u32, cols u32, gamma f64
_HEADER = struct.Struct("<4sHIId")
_POW3 = np.array([1, 3, 9, 27, 81], dtype=np.uint8)


class FormatError(ValueError):
    """Raised on a malformed serialized substrate."""


class TernaryMatrix:
    """Trit matrix {-1, 0, +1} with a single positive scale gamma."""

    __slots__ = ("trits", "gamma")

    def __init__(self, trits: np.ndarray, gamma: float):
        trits = np.asarray(trits, dtype=np.int8)
        if trits.ndim != 2:
            raise ShapeError(f"trits must be 2-D, got shape {trits.shape}")
        if np.any(np.abs(trits) > 1):
            raise ValueError("trit values must lie in {-1, 0, +1}")
        if gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {gamma}")
        self.trits = trits
        self.gamma = float(gamma)

    @property
    def rows(self) -> int:
        return self.trits.shape[0]

    @property
    def cols(self) -> int:
        return self.trits.shape[1]

    def dense(self, dtype=np.float64) -> np.ndarray:
        """Full-precision view gamma * trits (test/analysis helper)."""
        dt = np.dtype(dtype)
        return self.trits.astype(dt) * dt.type(self.gamma)

    def __repr__(self):
        return f"TernaryMatrix({self.rows}x{self.cols}, gamma={self.gamma:.6g})"


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # symmetric in sign, unlike numpy's banker's rounding
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def absmean_quantize(w: np.ndarray) -> TernaryMatrix:
    """Quantize a full-precision matrix to trits with AbsMean scaling.

    gamma is the mean |w_ij| over the whole matrix; trits are
    clip(round(w / (gamma + eps)), -1, +1) with round half-away-from-zero.
    An all-zero input yields gamma = 0 and all-zero trits (eps guard).
    """
    w = np.asarray(w)
    gamma = float(np.mean(np.abs(w), dtype=np.float64))
    scaled = w / (gamma + ABSMEAN_EPS)
    trits = np.clip(_round_half_away(scaled), -1, 1).astype(np.int8)
    return TernaryMatrix(trits, gamma)


def ste_backward(grad_out: np.ndarray) -> np.ndarray:
    """Straight-through gradient of the quantizer: identity, no clip mask."""
    return grad_out


def ternary_apply(x: np.ndarray, t: TernaryMatrix):
    """Compute gamma * (x @ trits^T): [N, cols] -> [N, rows].

    Returns (out, cache) for the backward pass.
    """
    if x.shape[-1] != t.cols:
        raise ShapeError(
            f"input width {x.shape[-1]} != substrate cols {t.cols}")
    tf = t.trits.astype(x.dtype)
    out = (x @ tf.T) * x.dtype.type(t.gamma)
    return out, (x, tf, t.gamma)


def ternary_apply_backward(grad: np.ndarray, cache):
    """Returns (grad_x, grad_quantized_matrix).

    grad_quantized_matrix is the gradient wrt the dequantized weights
    gamma * trits; under the straight-through estimator it flows unchanged
    into the latent master matrix.
    """
    x, tf, gamma = cache
    grad_x = (grad @ tf) * grad.dtype.type(gamma)
    grad_w = grad.T @ x
    return grad_x, grad_w


def pack(t: TernaryMatrix) -> bytes:
    """Serialize to the substrate file format (base-3, 5 trits per byte)."""
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, t.rows, t.cols, t.gamma)
    digits = (t.trits.ravel().astype(np.int32) + 1)  # {-1,0,1} -> {0,1,2}
    pad = (-digits.size) % 5
    if pad:
        digits = np.concatenate([digits, np.zeros(pad, dtype=np.int32)])
    # lowest row-major index = least significant base-3 digit
    payload = digits.reshape(-1, 5) @ _POW3.astype(np.int32)
    return header + payload.astype(np.uint8).tobytes()


def unpack(blob: bytes) -> TernaryMatrix:
    """Inverse of pack(); validates header, length, and digit range."""
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} bytes")
    magic, version, rows, cols, gamma = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    count = rows * cols
    expected = _HEADER.size + (count + 4) // 5
    if len(blob) != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(blob)}")
    payload = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size)
    if payload.size and payload.max() > 242:
        raise FormatError("byte value >= 243 in trit payload")
    digits = np.empty((payload.size, 5), dtype=np.uint8)
    rest = payload
    for k in range(5):
        digits[:, k] = rest % 3
        rest = rest // 3
    trits = digits.reshape(-1)[:count].astype(np.int8) - 1
    return TernaryMatrix(trits.reshape(rows, cols), gamma)
