#!/usr/bin/env python3
"""One orbital MoE layer: top-k routing around a shared substrate, the
auxiliary loss terms, and expert similarity at initialization."""

import numpy as np

from orbitmoe import (OrbitalMoELayer, expert_cosine_similarity, gate_topk,
                      init_orbital, load_balance_loss,
                      spatial_smoothness_loss)
from orbitmoe.tensor_core import Rng

layer = OrbitalMoELayer(d_model=32, d_ff=64, n_experts=4, top_k=2,
                        dtype=np.float64)
init_orbital(layer, Rng(0))

rng = Rng(7)
h = rng.normal((2, 16, 32))  # [batch, tokens, width]

idx, weights, stats = gate_topk(h, layer)
print("routing for the first three tokens of image 0:")
for t in range(3):
    print(f"  token {t}: experts {idx[0, t]} weights {np.round(weights[0, t], 3)}")
print("tokens per expert:", stats.token_counts,
      " (total assignments:", stats.n_assignments, ")")

out, stats = layer.forward(h)
print("\nforward:", h.shape, "->", out.shape)
print("load balance loss:", round(load_balance_loss(stats), 4),
      "(1.0 = uniform,", layer.n_experts, "= collapsed)")
print("spatial smoothness loss:",
      round(spatial_smoothness_loss(stats.gate_logits), 4))

# experts start as barely-different views of the same substrate
sim = expert_cosine_similarity(layer)
print("\neffective-expert cosine similarity at init:")
print(np.round(sim, 5))
off = sim[~np.eye(layer.n_experts, dtype=bool)]
print("off-diagonal mean:", round(float(off.mean()), 5))

# per-expert state is just the rotation angles
sizes = layer.param_group_sizes()
print("\nparameter census:", sizes)
print("angles per expert:",
      sizes["angles"] // layer.n_experts, "(the only per-expert state)")
