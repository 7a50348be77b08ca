"""Desk-scale vision transformer with a selectable FFN variant per block.

Pipeline (pre-LN): patch embedding + CLS token + learned positional
embeddings, then ``depth`` blocks of ``z += MHSA(LN(z)); h = LN(z);
z += FFN(h)``, a final LayerNorm, and a linear head on the CLS position.
The FFN is one of the three layers from :mod:`orbitmoe.moe`; routing blocks
accumulate a load-balance term and a spatial-smoothness term per block
(CLS is routed like any token but excluded from the smoothness diff, since
it has no grid position).

Every layer carries its own analytic backward; there is no autodiff tape.
Attention, embeddings and the head are full precision — only the FFN
substrate is quantized. Training is a single-threaded Adam loop with linear
warmup and cosine decay to zero.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ternary
from .data import augment_batch
from .moe import (DenseFFNLayer, OrbitalMoELayer, Param, StandardMoELayer,
                  init_dense, init_orbital, init_standard, load_balance_loss,
                  spatial_smoothness_backward, spatial_smoothness_backward_2d,
                  spatial_smoothness_loss, spatial_smoothness_loss_2d)
from .tensor_core import (Rng, ShapeError, gaussian, layer_norm,
                          layer_norm_backward, softmax,
                          softmax_cross_entropy,
                          softmax_cross_entropy_backward)

__all__ = ["ViTConfig", "ViTModel", "LossTerms", "TrainSchedule",
           "TrainingLog", "DivergenceError", "CheckpointError", "build_model",
           "init_model", "total_loss", "train", "evaluate",
           "parameter_census", "learning_rate_at", "save_checkpoint",
           "load_checkpoint", "Linear", "LayerNormLayer",
           "MultiHeadAttention"]

FFN_KINDS = ("orbital", "standard_moe", "dense")
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


class CheckpointError(ValueError):
    """Raised on an incompatible or malformed checkpoint."""


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    d_model: int = 256
    d_ff: int = 1024
    n_heads: int = 4
    depth: int = 7
    n_experts: int = 8
    top_k: int = 2
    n_butterfly_layers: int = 2
    lambda_bal: float = 0.05
    lambda_sp: float = 0.005
    smooth_2d: bool = False  # row+column grid neighbors instead of 1D order
    ffn_kind: str = "orbital"
    classes: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.ffn_kind not in FFN_KINDS:
            raise ValueError(f"ffn_kind must be one of {FFN_KINDS}, "
                             f"got {self.ffn_kind!r}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k {self.top_k} outside [1, n_experts="
                             f"{self.n_experts}]")
        if self.lambda_bal < 0 or self.lambda_sp < 0:
            raise ValueError("lambda_bal and lambda_sp must be >= 0")
        for name in ("image_size", "patch_size", "channels", "d_model",
                     "d_ff", "n_heads", "depth", "classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class LossTerms:
    """Per-block auxiliary loss values from one forward pass."""

    bal: list = field(default_factory=list)
    sp: list = field(default_factory=list)
    stats: list = field(default_factory=list)

    @property
    def bal_total(self) -> float:
        return float(sum(self.bal))

    @property
    def sp_total(self) -> float:
        return float(sum(self.sp))


class Linear:
    """y = x @ W^T (+ b), with grads for W, b and the input."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True,
                 dtype=np.float32):
        self.w = Param(np.zeros((out_dim, in_dim), dtype=dtype))
        self.b = Param(np.zeros(out_dim, dtype=dtype)) if bias else None
        self._cache = None

    def named_params(self, prefix: str):
        out = [(prefix + ".w", self.w)]
        if self.b is not None:
            out.append((prefix + ".b", self.b))
        return out

    def forward(self, x):
        self._cache = x
        y = x @ self.w.value.T
        if self.b is not None:
            y = y + self.b.value
        return y

    def backward(self, grad):
        x = self._cache
        g2 = grad.reshape(-1, grad.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        self.w.grad += g2.T @ x2
        if self.b is not None:
            self.b.grad += g2.sum(axis=0)
        return grad @ self.w.value


class LayerNormLayer:
    def __init__(self, dim: int, dtype=np.float32):
        self.gain = Param(np.ones(dim, dtype=dtype))
        self.bias = Param(np.zeros(dim, dtype=dtype))
        self._cache = None

    def named_params(self, prefix: str):
        return [(prefix + ".gain", self.gain), (prefix + ".bias", self.bias)]

    def forward(self, x):
        out, self._cache = layer_norm(x, self.gain.value, self.bias.value)
        return out

    def backward(self, grad):
        gx, gg, gb = layer_norm_backward(grad, self._cache)
        self.gain.grad += gg
        self.bias.grad += gb
        return gx


class MultiHeadAttention:
    """Standard full-softmax multi-head self-attention."""

    def __init__(self, d_model: int, n_heads: int, dtype=np.float32):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.scale = 1.0 / np.sqrt(self.d_head)
        self.wq = Linear(d_model, d_model, dtype=dtype)
        self.wk = Linear(d_model, d_model, dtype=dtype)
        self.wv = Linear(d_model, d_model, dtype=dtype)
        self.wo = Linear(d_model, d_model, dtype=dtype)
        self._cache = None

    def named_params(self, prefix: str):
        out = []
        for name, lin in (("q", self.wq), ("k", self.wk),
                          ("v", self.wv), ("o", self.wo)):
            out.extend(lin.named_params(f"{prefix}.{name}"))
        return out

    def _split(self, x):
        b, s, _ = x.shape
        return x.reshape(b, s, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, s, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)

    def forward(self, x):
        q = self._split(self.wq.forward(x))
        k = self._split(self.wk.forward(x))
        v = self._split(self.wv.forward(x))
        att = softmax(q @ k.transpose(0, 1, 3, 2) * self.scale, axis=-1)
        ctx = att @ v
        self._cache = (q, k, v, att)
        return self.wo.forward(self._merge(ctx))

    def backward(self, grad):
        q, k, v, att = self._cache
        dctx = self._split(self.wo.backward(grad))
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
        dq = ds @ k * self.scale
        dk = ds.transpose(0, 1, 3, 2) @ q * self.scale
        gx = self.wq.backward(self._merge(dq))
        gx += self.wk.backward(self._merge(dk))
        gx += self.wv.backward(self._merge(dv))
        return gx


def _make_ffn(cfg: ViTConfig, dtype, quantize: bool):
    if cfg.ffn_kind == "orbital":
        return OrbitalMoELayer(cfg.d_model, cfg.d_ff, cfg.n_experts,
                               cfg.top_k, cfg.n_butterfly_layers,
                               dtype=dtype, quantize=quantize)
    if cfg.ffn_kind == "standard_moe":
        return StandardMoELayer(cfg.d_model, cfg.d_ff, cfg.n_experts,
                                cfg.top_k, dtype=dtype)
    return DenseFFNLayer(cfg.d_model, cfg.d_ff, dtype=dtype)


class Block:
    def __init__(self, cfg: ViTConfig, dtype, quantize: bool):
        self.ln1 = LayerNormLayer(cfg.d_model, dtype)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, dtype)
        self.ln2 = LayerNormLayer(cfg.d_model, dtype)
        self.ffn = _make_ffn(cfg, dtype, quantize)
        self.smooth_2d = cfg.smooth_2d
        side = cfg.image_size // cfg.patch_size
        self.grid = (side, side)
        self._gate_logits = None

    def named_params(self, prefix: str):
        out = self.ln1.named_params(prefix + ".ln1")
        out += self.attn.named_params(prefix + ".attn")
        out += self.ln2.named_params(prefix + ".ln2")
        out += self.ffn.named_params(prefix + ".ffn.")
        return out

    def _smoothness(self, patch_logits):
        if self.smooth_2d:
            return spatial_smoothness_loss_2d(patch_logits, self.grid)
        return spatial_smoothness_loss(patch_logits)

    def _smoothness_grad(self, patch_logits):
        if self.smooth_2d:
            return spatial_smoothness_backward_2d(patch_logits, self.grid)
        return spatial_smoothness_backward(patch_logits)

    def forward(self, z):
        z = z + self.attn.forward(self.ln1.forward(z))
        h = self.ln2.forward(z)
        out, stats = self.ffn.forward(h)
        z = z + out
        if stats is None:
            self._gate_logits = None
            return z, 0.0, 0.0, None
        self._gate_logits = stats.gate_logits
        bal = load_balance_loss(stats)
        sp = self._smoothness(stats.gate_logits[:, 1:, :])  # drop CLS
        return z, bal, sp, stats

    def backward(self, dz, lambda_sp: float):
        gate_grad = None
        if self._gate_logits is not None and lambda_sp > 0:
            gate_grad = np.zeros_like(self._gate_logits)
            gate_grad[:, 1:, :] = lambda_sp * self._smoothness_grad(
                self._gate_logits[:, 1:, :])
        dh = self.ffn.backward(dz, gate_grad)
        dz = dz + self.ln2.backward(dh)
        da = self.attn.backward(dz)
        return dz + self.ln1.backward(da)


class ViTModel:
    """The full classifier; ``dtype`` picks the compute precision.

    ``quantize=False`` disables substrate quantization in orbital blocks
    (testing hook; see OrbitalMoELayer).
    """

    def __init__(self, config: ViTConfig, dtype=np.float32,
                 quantize: bool = True):
        self.config = config
        self.dtype = np.dtype(dtype).type
        cfg = config
        patch_dim = cfg.channels * cfg.patch_size ** 2
        self.patch_embed = Linear(patch_dim, cfg.d_model, dtype=dtype)
        self.cls_token = Param(np.zeros(cfg.d_model, dtype=dtype))
        self.pos_embed = Param(
            np.zeros((cfg.n_patches + 1, cfg.d_model), dtype=dtype))
        self.blocks = [Block(cfg, dtype, quantize) for _ in range(cfg.depth)]
        self.final_ln = LayerNormLayer(cfg.d_model, dtype)
        self.head = Linear(cfg.d_model, cfg.classes, dtype=dtype)
        self._seq_cache = None

    def named_params(self):
        out = self.patch_embed.named_params("patch_embed")
        out += [("cls_token", self.cls_token), ("pos_embed", self.pos_embed)]
        for i, blk in enumerate(self.blocks):
            out += blk.named_params(f"blocks.{i}")
        out += self.final_ln.named_params("final_ln")
        out += self.head.named_params("head")
        return out

    def zero_grads(self):
        for _, p in self.named_params():
            p.zero_grad()

    def _patchify(self, images):
        cfg = self.config
        b = images.shape[0]
        if images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected images [B,{cfg.channels},{cfg.image_size},"
                f"{cfg.image_size}], got {images.shape}")
        p = cfg.patch_size
        g = cfg.image_size // p
        x = images.reshape(b, cfg.channels, g, p, g, p)
        x = x.transpose(0, 2, 4, 1, 3, 5)  # [B, gy, gx, C, p, p]
        return x.reshape(b, g * g, cfg.channels * p * p)

    def forward(self, images):
        """Returns (logits [B, classes], LossTerms)."""
        images = np.asarray(images, dtype=self.dtype)
        patches = self._patchify(images)
        tok = self.patch_embed.forward(patches)
        b = tok.shape[0]
        cls = np.broadcast_to(self.cls_token.value,
                              (b, 1, self.config.d_model))
        z = np.concatenate([cls, tok], axis=1) + self.pos_embed.value
        terms = LossTerms()
        for blk in self.blocks:
            z, bal, sp, stats = blk.forward(z)
            if stats is not None:
                terms.bal.append(bal)
                terms.sp.append(sp)
                terms.stats.append(stats)
        zf = self.final_ln.forward(z)
        logits = self.head.forward(zf[:, 0, :])
        self._seq_cache = zf.shape
        return logits, terms

    def backward(self, dlogits):
        """Backprop from the classifier logits; accumulates every grad."""
        b, s, d = self._seq_cache
        dcls = self.head.backward(dlogits)
        dzf = np.zeros((b, s, d), dtype=dcls.dtype)
        dzf[:, 0, :] = dcls
        dz = self.final_ln.backward(dzf)
        lam = self.config.lambda_sp
        for blk in reversed(self.blocks):
            dz = blk.backward(dz, lam)
        self.pos_embed.grad += dz.sum(axis=0)
        self.cls_token.grad += dz[:, 0, :].sum(axis=0)
        dpatches = self.patch_embed.backward(dz[:, 1:, :])
        return dpatches


def init_model(model: ViTModel, rng: Rng) -> None:
    """Deterministic init of every parameter group from one Rng."""
    cfg = model.config
    dt = model.dtype
    patch_dim = cfg.channels * cfg.patch_size ** 2

    def fan_in(shape, n):
        return gaussian(rng, shape, 0.0, 1.0 / np.sqrt(n), dtype=dt)

    model.patch_embed.w.value[...] = fan_in(model.patch_embed.w.value.shape,
                                            patch_dim)
    model.cls_token.value[...] = gaussian(rng, cfg.d_model, 0.0, 0.02, dtype=dt)
    model.pos_embed.value[...] = gaussian(rng, model.pos_embed.value.shape,
                                          0.0, 0.02, dtype=dt)
    for blk in model.blocks:
        for lin in (blk.attn.wq, blk.attn.wk, blk.attn.wv, blk.attn.wo):
            lin.w.value[...] = fan_in(lin.w.value.shape, cfg.d_model)
        if blk.ffn.kind == "orbital":
            init_orbital(blk.ffn, rng)
        elif blk.ffn.kind == "standard_moe":
            init_standard(blk.ffn, rng)
        else:
            init_dense(blk.ffn, rng)
    model.head.w.value[...] = fan_in(model.head.w.value.shape, cfg.d_model)


def build_model(config: ViTConfig, dtype=np.float32,
                quantize: bool = True) -> ViTModel:
    """Construct and initialize a model from its config seed."""
    model = ViTModel(config, dtype=dtype, quantize=quantize)
    init_model(model, Rng(config.seed))
    return model


def total_loss(logits, labels, terms: LossTerms, config: ViTConfig) -> float:
    """L_CE + lambda_bal * sum_blocks L_bal + lambda_sp * sum_blocks L_sp."""
    ce, _ = softmax_cross_entropy(logits, labels)
    return ce + config.lambda_bal * terms.bal_total \
        + config.lambda_sp * terms.sp_total


def parameter_census(model: ViTModel) -> dict:
    """Exact learnable-parameter counts by group.

    Embeddings, attention, layernorm and head are backbone groups; the FFN
    groups (gate / angles / substrate / down_proj / experts / ffn) are summed
    across blocks and are what the analytical memory model cross-checks.
    """
    census = {"embeddings": (model.patch_embed.w.value.size
                             + model.patch_embed.b.value.size
                             + model.cls_token.value.size
                             + model.pos_embed.value.size),
              "attention": 0, "layernorm": 0,
              "head": model.head.w.value.size + model.head.b.value.size}
    for blk in model.blocks:
        census["attention"] += sum(p.value.size
                                   for _, p in blk.attn.named_params("a"))
        census["layernorm"] += sum(p.value.size for _, p in
                                   blk.ln1.named_params("l")
                                   + blk.ln2.named_params("l"))
        for group, size in blk.ffn.param_group_sizes().items():
            census[group] = census.get(group, 0) + size
    census["layernorm"] += sum(p.value.size
                               for _, p in model.final_ln.named_params("f"))
    census["total"] = sum(v for k, v in census.items() if k != "total")
    return census


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainSchedule:
    epochs: int
    batch_size: int
    peak_lr: float = 3e-4
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.0
    augment: bool = False  # random pad-crop + horizontal flip per batch


def learning_rate_at(step: int, total_steps: int, sched: TrainSchedule) -> float:
    """Linear warmup from 0 to peak, then cosine decay to 0 at the last step."""
    warmup = max(1, int(sched.warmup_frac * total_steps))
    if step < warmup:
        return sched.peak_lr * step / warmup
    span = max(1, total_steps - 1 - warmup)
    progress = min(1.0, (step - warmup) / span)
    return float(sched.peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress)))


class Adam:
    def __init__(self, params, sched: TrainSchedule):
        self.params = params
        self.sched = sched
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        s = self.sched
        bc1 = 1.0 - s.beta1 ** self.t
        bc2 = 1.0 - s.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + s.adam_eps)


@dataclass
class TrainingLog:
    records: list
    expert_count_shape: tuple  # (n_routed_blocks, n_experts)

    def final(self) -> dict:
        return self.records[-1]


def _epoch_record(epoch, lr, tr_loss, tr_acc, val_loss, val_acc,
                  bal, sp, counts):
    return {"epoch": epoch, "lr": lr, "train_loss": tr_loss,
            "train_acc": tr_acc, "val_loss": val_loss, "val_acc": val_acc,
            "loss_bal": bal, "loss_sp": sp, "expert_counts": counts}


def train(model: ViTModel, train_images, train_labels, sched: TrainSchedule,
          val_images=None, val_labels=None, shuffle_rng: Rng | None = None,
          on_epoch=None) -> TrainingLog:
    """Mini-batch training; returns a per-epoch log.

    The substrate trains through the straight-through estimator; everything
    else by its analytic gradient. Raises DivergenceError if the loss goes
    non-finite. Deterministic given the model init and ``shuffle_rng`` seed.
    """
    cfg = model.config
    n = len(train_labels)
    if n == 0:
        raise ValueError("training set is empty")
    rng = shuffle_rng if shuffle_rng is not None else Rng(cfg.seed + 1)
    aug_rng = rng.split() if sched.augment else None
    params = [p for _, p in model.named_params()]
    opt = Adam(params, sched)
    steps_per_epoch = (n + sched.batch_size - 1) // sched.batch_size
    total_steps = sched.epochs * steps_per_epoch
    n_routed = sum(1 for blk in model.blocks
                   if blk.ffn.kind != "dense")
    records = []
    step = 0
    for epoch in range(sched.epochs):
        order = rng.permutation(n)
        ep_loss = ep_bal = ep_sp = 0.0
        ep_correct = 0
        counts = np.zeros((n_routed, cfg.n_experts), dtype=np.int64)
        lr = 0.0
        for b0 in range(0, n, sched.batch_size):
            sel = order[b0:b0 + sched.batch_size]
            xb = train_images[sel]
            yb = train_labels[sel]
            if aug_rng is not None:
                xb = augment_batch(xb, aug_rng)
            logits, terms = model.forward(xb)
            ce, ce_cache = softmax_cross_entropy(logits, yb,
                                                 sched.label_smoothing)
            loss = ce + cfg.lambda_bal * terms.bal_total \
                + cfg.lambda_sp * terms.sp_total
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss {loss} at epoch {epoch} step {step}")
            model.zero_grads()
            model.backward(softmax_cross_entropy_backward(ce_cache))
            lr = learning_rate_at(step, total_steps, sched)
            opt.step(lr)
            step += 1
            ep_loss += loss * len(sel)
            ep_bal += terms.bal_total * len(sel)
            ep_sp += terms.sp_total * len(sel)
            ep_correct += int((logits.argmax(axis=1) == yb).sum())
            for li, st in enumerate(terms.stats):
                counts[li] += st.token_counts
        val_loss = val_acc = float("nan")
        if val_images is not None:
            val_acc, val_loss = evaluate(model, val_images, val_labels)
        rec = _epoch_record(epoch, lr, ep_loss / n, ep_correct / n,
                            val_loss, val_acc, ep_bal / n, ep_sp / n,
                            counts.tolist())
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainingLog(records, (n_routed, cfg.n_experts))


def evaluate(model: ViTModel, images, labels, batch_size: int = 256):
    """Top-1 accuracy and mean total loss over a split; mutates nothing."""
    n = len(labels)
    correct = 0
    loss_sum = 0.0
    for b0 in range(0, n, batch_size):
        xb = images[b0:b0 + batch_size]
        yb = labels[b0:b0 + batch_size]
        logits, terms = model.forward(xb)
        loss_sum += total_loss(logits, yb, terms, model.config) * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / n, loss_sum / n


# ---------------------------------------------------------------------------
# checkpoint container: a single .npz with a versioned header entry, the
# JSON-encoded config, every parameter array under "p/<name>", and one packed
# ternary snapshot of each orbital block's substrate under "tern/<i>".


def save_checkpoint(model: ViTModel, path) -> None:
    arrays = {"version": np.array([CHECKPOINT_VERSION], dtype=np.uint32)}
    meta = {"config": asdict(model.config),
            "dtype": np.dtype(model.dtype).name}
    arrays["config_json"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8).copy()
    for name, p in model.named_params():
        arrays["p/" + name] = p.value
    for i, blk in enumerate(model.blocks):
        if blk.ffn.kind == "orbital":
            packed = ternary.pack(
                ternary.absmean_quantize(blk.ffn.substrate.value))
            arrays[f"tern/{i}"] = np.frombuffer(packed, dtype=np.uint8).copy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> ViTModel:
    with np.load(path) as data:
        if "version" not in data or "config_json" not in data:
            raise CheckpointError("missing checkpoint header entries")
        version = int(data["version"][0])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta = json.loads(bytes(data["config_json"]).decode())
        config = ViTConfig(**meta["config"])
        model = ViTModel(config, dtype=np.dtype(meta["dtype"]))
        for name, p in model.named_params():
            key = "p/" + name
            if key not in data:
                raise CheckpointError(f"checkpoint missing parameter {name}")
            stored = data[key]
            if stored.shape != p.value.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint "
                    f"{stored.shape} vs model {p.value.shape}")
            p.value[...] = stored
    return model
