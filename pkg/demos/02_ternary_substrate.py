#!/usr/bin/env python3
"""The shared ternary substrate: AbsMean quantization, the straight-through
gradient, and the 1.6-bit-per-weight file format."""

import numpy as np

from orbitmoe import absmean_quantize, pack, ste_backward, ternary_apply, unpack
from orbitmoe.tensor_core import Rng

# --- quantization on a worked example ---------------------------------------
w = np.array([[0.5, -0.5], [0.05, 0.0]])
t = absmean_quantize(w)
print("latent:\n", w)
print("gamma (mean |w|):", t.gamma)
print("trits:\n", t.trits)
print("dequantized:\n", t.dense())

# --- applying the ternary matrix ---------------------------------------------
rng = Rng(1)
latent = rng.normal((16, 8), 0.0, 0.2)
t = absmean_quantize(latent)
x = rng.normal((4, 8))
out, _ = ternary_apply(x, t)
print("\nternary up-projection:", x.shape, "->", out.shape)
err = np.abs(out - x @ (t.gamma * t.trits.astype(float)).T).max()
print("matches dense gamma*T matmul within", err)

# --- straight-through estimator ----------------------------------------------
g = rng.normal((16, 8))
print("\nSTE passes gradients through unchanged:",
      np.array_equal(ste_backward(g), g))

# --- serialization at 1.6 bits per weight ------------------------------------
big = absmean_quantize(rng.normal((1024, 256), 0.0, 0.1))
blob = pack(big)
n_weights = 1024 * 256
print(f"\npacked {n_weights} trits into {len(blob)} bytes "
      f"({8 * len(blob) / n_weights:.3f} bits/weight incl. header)")
back = unpack(blob)
print("round trip exact:", np.array_equal(back.trits, big.trits)
      and back.gamma == big.gamma)
print("fp32 equivalent would be", 4 * n_weights, "bytes")
