"""Mixture-of-experts feed-forward layers.

Three interchangeable variants:

* ``OrbitalMoELayer`` — every expert is a pair of learned butterfly rotations
  around one shared ternary-quantized up-projection; the only per-expert
  state is the Givens angles. A shared full-precision down-projection maps
  back to the model width. Experts are never materialized on this path.
* ``StandardMoELayer`` — the baseline with independent full-precision up and
  down matrices per expert.
* ``DenseFFNLayer`` — a plain two-matrix FFN, no routing.

Routing is top-k on gate logits with ties broken toward the lower expert
index, and the routing weights are the softmax over the k selected logits.
Gradients reach the gate only through those renormalized weights (and through
the spatial smoothness penalty); the hard top-k selection itself is treated
as non-differentiable.

Expert dispatch loops are sequential per expert; output rows form disjoint
scatter targets per (token, slot), so results match any reordering to within
accumulation roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .butterfly import (ButterflyAngles, butterfly_backward,
                        butterfly_forward, materialize)
from .tensor_core import gaussian, gelu, gelu_backward, softmax
from .ternary import (absmean_quantize, ste_backward, ternary_apply,
                      ternary_apply_backward)

__all__ = ["Param", "RoutingStats", "OrbitalMoELayer", "StandardMoELayer",
           "DenseFFNLayer", "gate_topk", "load_balance_loss",
           "spatial_smoothness_loss", "spatial_smoothness_backward",
           "spatial_smoothness_loss_2d", "spatial_smoothness_backward_2d",
           "init_orbital", "init_standard", "init_dense",
           "effective_expert_matrix", "expert_cosine_similarity",
           "ANGLE_INIT_STD"]

ANGLE_INIT_STD = 0.01


class Param:
    """Learnable array plus its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class RoutingStats:
    """Per-forward routing bookkeeping.

    ``token_counts[i]`` is the number of (token, slot) assignments expert i
    received; ``load_fractions`` divides by the total assignment count
    (all routed tokens times k, CLS included when present), so they sum to 1.
    ``gate_logits`` keeps the raw logits in the caller's sequence order.
    """

    token_counts: np.ndarray
    load_fractions: np.ndarray
    gate_logits: np.ndarray
    n_assignments: int


def _topk_select(logits: np.ndarray, k: int):
    """Top-k expert ids (ties -> lower index) and softmaxed weights."""
    # stable argsort on -logits keeps the lower index first among ties
    idx = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    sel = np.take_along_axis(logits, idx, axis=1)
    return idx, softmax(sel, axis=1)


def gate_topk(h: np.ndarray, layer):
    """Route tokens: returns (indices [M,k], weights [M,k], RoutingStats)."""
    if layer.top_k > layer.n_experts:
        raise ValueError(
            f"top_k={layer.top_k} exceeds n_experts={layer.n_experts}")
    lead = h.shape[:-1]
    flat = h.reshape(-1, h.shape[-1])
    logits = flat @ layer.gate.value.T
    idx, weights = _topk_select(logits, layer.top_k)
    counts = np.bincount(idx.ravel(), minlength=layer.n_experts)
    total = idx.size
    stats = RoutingStats(
        token_counts=counts,
        load_fractions=counts / total,
        gate_logits=logits.reshape(lead + (layer.n_experts,)),
        n_assignments=total,
    )
    return idx.reshape(lead + (layer.top_k,)), \
        weights.reshape(lead + (layer.top_k,)), stats


def load_balance_loss(stats: RoutingStats) -> float:
    """N_E * sum_i f_i^2; 1.0 under uniform routing, N_E under collapse.

    Computed from realized hard counts, so it carries no gradient.
    """
    f = stats.load_fractions
    return float(len(f) * np.sum(f * f))


def spatial_smoothness_loss(gate_logits: np.ndarray) -> float:
    """Mean squared difference of gate logits between adjacent tokens.

    ``gate_logits`` is [B, T, N_E] in flattened row-major grid order (the
    caller drops the CLS position first). Defined as 0 for T < 2.
    """
    b, t = gate_logits.shape[0], gate_logits.shape[1]
    if t < 2:
        return 0.0
    diff = gate_logits[:, 1:, :] - gate_logits[:, :-1, :]
    return float(np.sum(diff * diff) / (b * (t - 1)))


def spatial_smoothness_backward(gate_logits: np.ndarray) -> np.ndarray:
    """Gradient of spatial_smoothness_loss wrt the gate logits."""
    g = np.zeros_like(gate_logits)
    b, t = gate_logits.shape[0], gate_logits.shape[1]
    if t < 2:
        return g
    diff = (gate_logits[:, 1:, :] - gate_logits[:, :-1, :]) * (2.0 / (b * (t - 1)))
    g[:, 1:, :] += diff
    g[:, :-1, :] -= diff
    return g


def spatial_smoothness_loss_2d(gate_logits: np.ndarray, grid) -> float:
    """Grid-neighbor variant: squared logit diffs over row AND column neighbors.

    ``gate_logits`` is [B, T, N_E] with T = grid[0] * grid[1] patch tokens in
    row-major order; the mean is over batch and neighbor-pair count.
    """
    gh, gw = grid
    b = gate_logits.shape[0]
    n_pairs = (gh - 1) * gw + gh * (gw - 1)
    if n_pairs == 0:
        return 0.0
    g = gate_logits.reshape(b, gh, gw, -1)
    dv = g[:, 1:, :, :] - g[:, :-1, :, :]
    dh = g[:, :, 1:, :] - g[:, :, :-1, :]
    return float((np.sum(dv * dv) + np.sum(dh * dh)) / (b * n_pairs))


def spatial_smoothness_backward_2d(gate_logits: np.ndarray, grid) -> np.ndarray:
    """Gradient of the grid-neighbor variant wrt the gate logits."""
    gh, gw = grid
    b = gate_logits.shape[0]
    out = np.zeros_like(gate_logits)
    n_pairs = (gh - 1) * gw + gh * (gw - 1)
    if n_pairs == 0:
        return out
    g = gate_logits.reshape(b, gh, gw, -1)
    o = out.reshape(b, gh, gw, -1)
    scale = 2.0 / (b * n_pairs)
    dv = (g[:, 1:, :, :] - g[:, :-1, :, :]) * scale
    dh = (g[:, :, 1:, :] - g[:, :, :-1, :]) * scale
    o[:, 1:, :, :] += dv
    o[:, :-1, :, :] -= dv
    o[:, :, 1:, :] += dh
    o[:, :, :-1, :] -= dh
    return out


def _routing_backward(layer, flat, idx, weights, grad_sel_w,
                      grad_gate_logits, grad_in):
    """Push gradients on the selected routing weights back to the gate.

    Differentiates the softmax over the k selected logits, adds any caller
    gradient on the raw logits, accumulates layer.gate.grad, and adds the
    gate's input contribution to grad_in.
    """
    gsel = weights * (grad_sel_w
                      - np.sum(grad_sel_w * weights, axis=1, keepdims=True))
    grad_logits = np.zeros((flat.shape[0], layer.n_experts), dtype=flat.dtype)
    np.put_along_axis(grad_logits, idx, gsel, axis=1)
    if grad_gate_logits is not None:
        grad_logits += grad_gate_logits.reshape(grad_logits.shape)
    layer.gate.grad += grad_logits.T @ flat
    grad_in += grad_logits @ layer.gate.value


class OrbitalMoELayer:
    """Experts as butterfly-rotated views of a shared ternary substrate.

    Per token routed to expert i the layer computes
    ``w_i * W_down @ B(phi_i) @ GELU(Q(W_base) @ B(theta_i) @ h)``,
    re-quantizing the substrate once per forward call. With
    ``quantize=False`` the latent substrate is applied directly (debug mode
    for gradient checks; the straight-through path is otherwise not
    finite-difference checkable).
    """

    kind = "orbital"

    def __init__(self, d_model: int, d_ff: int, n_experts: int, top_k: int,
                 n_rot_layers: int = 2, dtype=np.float32, quantize: bool = True):
        if not 1 <= top_k <= n_experts:
            raise ValueError(f"need 1 <= top_k <= n_experts, got k={top_k}")
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_experts = n_experts
        self.top_k = top_k
        self.n_rot_layers = n_rot_layers
        self.dtype = dtype
        self.quantize = quantize
        self.gate = Param(np.zeros((n_experts, d_model), dtype=dtype))
        self.substrate = Param(np.zeros((d_ff, d_model), dtype=dtype))
        self.down_proj = Param(np.zeros((d_model, d_ff), dtype=dtype))
        self.theta = []
        self.phi = []
        self.theta_params = []
        self.phi_params = []
        for _ in range(n_experts):
            th = ButterflyAngles(d_model, n_rot_layers, dtype=dtype)
            ph = ButterflyAngles(d_ff, n_rot_layers, dtype=dtype)
            tp, pp = Param(th.angles), Param(ph.angles)
            th.angles, ph.angles = tp.value, pp.value  # share storage
            self.theta.append(th)
            self.phi.append(ph)
            self.theta_params.append(tp)
            self.phi_params.append(pp)
        self._cache = None

    def named_params(self, prefix: str = ""):
        out = [(prefix + "gate", self.gate),
               (prefix + "substrate", self.substrate),
               (prefix + "down_proj", self.down_proj)]
        for i in range(self.n_experts):
            out.append((f"{prefix}theta.{i}", self.theta_params[i]))
            out.append((f"{prefix}phi.{i}", self.phi_params[i]))
        return out

    def param_group_sizes(self):
        """Parameter census by group (used by the memory cross-check)."""
        return {
            "gate": self.gate.value.size,
            "substrate": self.substrate.value.size,
            "down_proj": self.down_proj.value.size,
            "angles": sum(p.value.size for p in self.theta_params)
            + sum(p.value.size for p in self.phi_params),
        }

    def forward(self, h: np.ndarray):
        """h is [..., d_model]; returns (out of same shape, RoutingStats)."""
        lead = h.shape[:-1]
        flat = h.reshape(-1, self.d_model)
        m = flat.shape[0]
        idx, weights, stats = gate_topk(h, self)
        idx = idx.reshape(m, self.top_k)
        weights = weights.reshape(m, self.top_k)
        if self.quantize:
            tern = absmean_quantize(self.substrate.value)
        else:
            tern = None
        out = np.zeros_like(flat)
        expert_caches = []
        for i in range(self.n_experts):
            rows, slots = np.nonzero(idx == i)
            if rows.size == 0:
                expert_caches.append(None)
                continue
            hi = flat[rows]
            a, th_cache = butterfly_forward(hi, self.theta[i])
            if tern is not None:
                pre, up_cache = ternary_apply(a, tern)
            else:
                pre, up_cache = a @ self.substrate.value.T, a
            act, gelu_cache = gelu(pre)
            u, ph_cache = butterfly_forward(act, self.phi[i])
            y = u @ self.down_proj.value.T
            w = weights[rows, slots]
            out[rows] += w[:, None] * y
            expert_caches.append((rows, slots, th_cache, up_cache,
                                  gelu_cache, ph_cache, u, y))
        self._cache = (flat, idx, weights, expert_caches, m)
        return out.reshape(lead + (self.d_model,)), stats

    def backward(self, grad_out: np.ndarray, grad_gate_logits=None):
        """Accumulate parameter grads; returns grad wrt the layer input.

        ``grad_gate_logits`` (same shape as stats.gate_logits) lets the
        caller inject the smoothness-penalty gradient on the raw logits.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward")
        flat, idx, weights, expert_caches, m = self._cache
        gflat = grad_out.reshape(m, self.d_model)
        grad_in = np.zeros_like(flat)
        grad_sel_w = np.zeros_like(weights)
        for i, cache in enumerate(expert_caches):
            if cache is None:
                continue
            rows, slots, th_cache, up_cache, gelu_cache, ph_cache, u, y = cache
            go = gflat[rows]
            grad_sel_w[rows, slots] = np.sum(go * y, axis=1)
            gy = go * weights[rows, slots][:, None]
            self.down_proj.grad += gy.T @ u
            gu = gy @ self.down_proj.value
            gact, gphi = butterfly_backward(gu, ph_cache)
            self.phi_params[i].grad += gphi
            gpre = gelu_backward(gact, gelu_cache)
            if self.quantize:
                ga, gw = ternary_apply_backward(gpre, up_cache)
                self.substrate.grad += ste_backward(gw)
            else:
                a = up_cache
                ga = gpre @ self.substrate.value
                self.substrate.grad += gpre.T @ a
            ghi, gtheta = butterfly_backward(ga, th_cache)
            self.theta_params[i].grad += gtheta
            grad_in[rows] += ghi
        _routing_backward(self, flat, idx, weights, grad_sel_w,
                          grad_gate_logits, grad_in)
        self._cache = None
        return grad_in.reshape(grad_out.shape)


class StandardMoELayer:
    """Baseline MoE: independent full-precision up/down matrices per expert."""

    kind = "standard_moe"

    def __init__(self, d_model: int, d_ff: int, n_experts: int, top_k: int,
                 dtype=np.float32):
        if not 1 <= top_k <= n_experts:
            raise ValueError(f"need 1 <= top_k <= n_experts, got k={top_k}")
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_experts = n_experts
        self.top_k = top_k
        self.dtype = dtype
        self.gate = Param(np.zeros((n_experts, d_model), dtype=dtype))
        self.up = Param(np.zeros((n_experts, d_ff, d_model), dtype=dtype))
        self.down = Param(np.zeros((n_experts, d_model, d_ff), dtype=dtype))
        self._cache = None

    def named_params(self, prefix: str = ""):
        return [(prefix + "gate", self.gate), (prefix + "up", self.up),
                (prefix + "down", self.down)]

    def param_group_sizes(self):
        return {"gate": self.gate.value.size,
                "experts": self.up.value.size + self.down.value.size}

    def forward(self, h: np.ndarray):
        lead = h.shape[:-1]
        flat = h.reshape(-1, self.d_model)
        m = flat.shape[0]
        idx, weights, stats = gate_topk(h, self)
        idx = idx.reshape(m, self.top_k)
        weights = weights.reshape(m, self.top_k)
        out = np.zeros_like(flat)
        expert_caches = []
        for i in range(self.n_experts):
            rows, slots = np.nonzero(idx == i)
            if rows.size == 0:
                expert_caches.append(None)
                continue
            hi = flat[rows]
            pre = hi @ self.up.value[i].T
            act, gelu_cache = gelu(pre)
            y = act @ self.down.value[i].T
            out[rows] += weights[rows, slots][:, None] * y
            expert_caches.append((rows, slots, hi, gelu_cache, act, y))
        self._cache = (flat, idx, weights, expert_caches, m)
        return out.reshape(lead + (self.d_model,)), stats

    def backward(self, grad_out: np.ndarray, grad_gate_logits=None):
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward")
        flat, idx, weights, expert_caches, m = self._cache
        gflat = grad_out.reshape(m, self.d_model)
        grad_in = np.zeros_like(flat)
        grad_sel_w = np.zeros_like(weights)
        for i, cache in enumerate(expert_caches):
            if cache is None:
                continue
            rows, slots, hi, gelu_cache, act, y = cache
            go = gflat[rows]
            grad_sel_w[rows, slots] = np.sum(go * y, axis=1)
            gy = go * weights[rows, slots][:, None]
            self.down.grad[i] += gy.T @ act
            gact = gy @ self.down.value[i]
            gpre = gelu_backward(gact, gelu_cache)
            self.up.grad[i] += gpre.T @ hi
            grad_in[rows] += gpre @ self.up.value[i]
        _routing_backward(self, flat, idx, weights, grad_sel_w,
                          grad_gate_logits, grad_in)
        self._cache = None
        return grad_in.reshape(grad_out.shape)


class DenseFFNLayer:
    """Plain GELU FFN, one shared up and down matrix, no routing."""

    kind = "dense"

    def __init__(self, d_model: int, d_ff: int, dtype=np.float32):
        self.d_model = d_model
        self.d_ff = d_ff
        self.dtype = dtype
        self.up = Param(np.zeros((d_ff, d_model), dtype=dtype))
        self.down = Param(np.zeros((d_model, d_ff), dtype=dtype))
        self._cache = None

    def named_params(self, prefix: str = ""):
        return [(prefix + "up", self.up), (prefix + "down", self.down)]

    def param_group_sizes(self):
        return {"ffn": self.up.value.size + self.down.value.size}

    def forward(self, h: np.ndarray):
        lead = h.shape[:-1]
        flat = h.reshape(-1, self.d_model)
        pre = flat @ self.up.value.T
        act, gelu_cache = gelu(pre)
        out = act @ self.down.value.T
        self._cache = (flat, gelu_cache, act)
        return out.reshape(lead + (self.d_model,)), None

    def backward(self, grad_out: np.ndarray, grad_gate_logits=None):
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward")
        flat, gelu_cache, act = self._cache
        gflat = grad_out.reshape(flat.shape[0], self.d_model)
        self.down.grad += gflat.T @ act
        gact = gflat @ self.down.value
        gpre = gelu_backward(gact, gelu_cache)
        self.up.grad += gpre.T @ flat
        grad_in = gpre @ self.up.value
        self._cache = None
        return grad_in.reshape(grad_out.shape)


def _fan_in_normal(rng, shape, fan_in, dtype):
    return gaussian(rng, shape, 0.0, 1.0 / np.sqrt(fan_in), dtype=dtype)


def init_orbital(layer: OrbitalMoELayer, rng) -> None:
    """Near-identity init: every angle ~ N(0, 0.01^2), drawn independently
    per expert so symmetry is broken from the first forward pass; gate,
    substrate and down-projection use fan-in-scaled normals."""
    dt = layer.dtype
    layer.gate.value[...] = _fan_in_normal(rng, layer.gate.value.shape,
                                           layer.d_model, dt)
    layer.substrate.value[...] = _fan_in_normal(
        rng, layer.substrate.value.shape, layer.d_model, dt)
    layer.down_proj.value[...] = _fan_in_normal(
        rng, layer.down_proj.value.shape, layer.d_ff, dt)
    for i in range(layer.n_experts):
        layer.theta_params[i].value[...] = gaussian(
            rng, layer.theta_params[i].value.shape, 0.0, ANGLE_INIT_STD, dtype=dt)
        layer.phi_params[i].value[...] = gaussian(
            rng, layer.phi_params[i].value.shape, 0.0, ANGLE_INIT_STD, dtype=dt)


def init_standard(layer: StandardMoELayer, rng) -> None:
    """Fan-in-scaled normal init for the baseline MoE."""
    dt = layer.dtype
    layer.gate.value[...] = _fan_in_normal(rng, layer.gate.value.shape,
                                           layer.d_model, dt)
    layer.up.value[...] = _fan_in_normal(rng, layer.up.value.shape,
                                         layer.d_model, dt)
    layer.down.value[...] = _fan_in_normal(rng, layer.down.value.shape,
                                           layer.d_ff, dt)


def init_dense(layer: DenseFFNLayer, rng) -> None:
    """Fan-in-scaled normal init for the dense FFN."""
    dt = layer.dtype
    layer.up.value[...] = _fan_in_normal(rng, layer.up.value.shape,
                                         layer.d_model, dt)
    layer.down.value[...] = _fan_in_normal(rng, layer.down.value.shape,
                                           layer.d_ff, dt)


def effective_expert_matrix(layer: OrbitalMoELayer, i: int) -> np.ndarray:
    """Dense [d_ff, d_model] map an expert would equal with GELU removed.

    Action on a column vector h equals rotate-in, ternary up-project,
    rotate-out on the live forward path. Analysis utility only.
    """
    tern = absmean_quantize(layer.substrate.value)
    b_theta = materialize(layer.theta[i])
    b_phi = materialize(layer.phi[i])
    return b_phi @ tern.dense(layer.substrate.value.dtype) @ b_theta


def expert_cosine_similarity(layer: OrbitalMoELayer) -> np.ndarray:
    """Pairwise cosine similarity of flattened effective expert matrices."""
    mats = np.stack([effective_expert_matrix(layer, i).ravel()
                     for i in range(layer.n_experts)]).astype(np.float64)
    norms = np.linalg.norm(mats, axis=1, keepdims=True)
    unit = mats / norms
    sim = unit @ unit.T
    np.fill_diagonal(sim, 1.0)
    return sim
