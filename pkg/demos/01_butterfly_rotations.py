#!/usr/bin/env python3
"""Walk through the butterfly rotation layer: Givens stages, the perfect
shuffle, orthogonality, and parameter counts."""

import numpy as np

from orbitmoe import ButterflyAngles, butterfly_forward, materialize, next_pow2
from orbitmoe.tensor_core import Rng

rng = Rng(0)

# --- a single 2x2 Givens rotation ------------------------------------------
ba = ButterflyAngles(2, n_layers=1, angles=[[np.pi / 2]])
out, _ = butterfly_forward(np.array([[1.0, 0.0]]), ba)
print("quarter turn of (1, 0):", out[0])

# --- the dense matrix a rotation is equivalent to ---------------------------
ba = ButterflyAngles(8, n_layers=2)
ba.angles[...] = rng.normal(ba.angles.shape, 0.0, 0.5)
b = materialize(ba)
print("\nmaterialized 8x8 butterfly (2 stages):")
print(np.round(b, 3))
print("orthogonality  max|B B^T - I| =", np.abs(b @ b.T - np.eye(8)).max())

# --- norm preservation on a batch -------------------------------------------
x = rng.normal((4, 8))
y, _ = butterfly_forward(x, ba)
print("\nrow norms in: ", np.round(np.linalg.norm(x, axis=1), 6))
print("row norms out:", np.round(np.linalg.norm(y, axis=1), 6))

# --- zero angles leave only the fixed shuffle permutation -------------------
zero = ButterflyAngles(8, n_layers=2)
print("\nzero-angle transform of [0..7]:",
      butterfly_forward(np.arange(8.0)[None], zero)[0][0])

# --- parameter count scales as n_layers * d/2 -------------------------------
for d in (64, 200, 256, 1024):
    ba = ButterflyAngles(d, n_layers=2)
    print(f"width {d:5d} (padded {next_pow2(d):5d}): "
          f"{ba.n_params:5d} angles vs {d * d:8d} dense entries")
