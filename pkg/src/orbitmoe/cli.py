"""Batch experiment entry points.

Subcommands: ``train``, ``eval``, ``memory-report``, ``similarity``. Every
command is non-interactive, all randomness derives from the run seed, and
re-running a report command overwrites its outputs idempotently.

Errors print one machine-parsable line to stderr, ``error[<code>]: <text>``,
and exit nonzero: 2 for configuration problems, 3 for dataset problems, 4
for training divergence. The default output directory is the ``ORBITMOE_OUT``
environment variable, falling back to ``./runs``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import memory_model as mm
from .data import DataError, SyntheticSpec, gen_synthetic, load_cifar100
from .moe import expert_cosine_similarity
from .tensor_core import Rng
from .ternary import FormatError
from .vit import (CheckpointError, DivergenceError, TrainSchedule, ViTConfig,
                  build_model, evaluate, load_checkpoint, parameter_census,
                  save_checkpoint, train)

__all__ = ["main", "RunConfig", "ConfigError", "parse_data_spec"]

ENV_OUT_DIR = "ORBITMOE_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    """Invalid run configuration (bad value, unknown key, mismatch)."""


@dataclasses.dataclass
class RunConfig:
    """Everything one training/eval run needs; validated before any compute."""

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
    smooth_2d: bool = False
    ffn_kind: str = "orbital"
    classes: int | None = None  # inferred from the dataset when unset
    seed: int = 0
    epochs: int = 10
    batch: int = 32
    lr: float = 3e-4
    label_smoothing: float = 0.0
    augment: bool = False
    standardize: bool = False
    data: str = "synthetic:classes=4,train=512,val=128"
    out: str | None = None
    format: str = "csv"

    def vit_config(self, n_classes: int) -> ViTConfig:
        if self.classes is not None and self.classes != n_classes:
            raise ConfigError(
                f"classes: config says {self.classes} but the dataset "
                f"has {n_classes}")
        try:
            return ViTConfig(
                image_size=self.image_size, patch_size=self.patch_size,
                channels=self.channels, d_model=self.d_model, d_ff=self.d_ff,
                n_heads=self.n_heads, depth=self.depth,
                n_experts=self.n_experts, top_k=self.top_k,
                n_butterfly_layers=self.n_butterfly_layers,
                lambda_bal=self.lambda_bal, lambda_sp=self.lambda_sp,
                smooth_2d=self.smooth_2d, ffn_kind=self.ffn_kind,
                classes=n_classes, seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def out_dir(self) -> str:
        return self.out or os.environ.get(ENV_OUT_DIR, "runs")


_RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    """Config file (JSON) merged with CLI overrides; unknown keys rejected."""
    values = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path}: expected a JSON object")
        for key, val in raw.items():
            if key not in _RUN_FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = val
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.epochs < 1 or cfg.batch < 1:
        raise ConfigError("epochs and batch must be >= 1")
    if cfg.lr <= 0:
        raise ConfigError("lr must be > 0")
    if cfg.format not in ("csv", "json"):
        raise ConfigError(f"format must be csv|json, got {cfg.format!r}")
    return cfg


def parse_data_spec(spec: str, standardize: bool = False):
    """Parse --data into (train, val) datasets plus the class count.

    Forms: ``cifar100:<dir>`` or
    ``synthetic:classes=4,train=512,val=128[,size=32][,noise=0.08][,seed=N]``.
    """
    kind, _, rest = spec.partition(":")
    if kind == "cifar100":
        if not rest:
            raise ConfigError("cifar100 data spec needs a directory")
        train_ds, val_ds = load_cifar100(rest, standardize=standardize)
        return train_ds, val_ds, 100
    if kind == "synthetic":
        fields = {"classes": 4, "train": 512, "val": 128,
                  "size": 32, "noise": 0.08, "seed": 0}
        if rest:
            for part in rest.split(","):
                key, _, val = part.partition("=")
                if key not in fields:
                    raise ConfigError(f"unknown synthetic data key {key!r}")
                fields[key] = float(val) if key == "noise" else int(val)
        syn = SyntheticSpec(classes=fields["classes"],
                            n_train=fields["train"], n_val=fields["val"],
                            image_size=fields["size"], noise=fields["noise"])
        train_ds, val_ds = gen_synthetic(syn, fields["seed"])
        return train_ds, val_ds, syn.classes
    raise ConfigError(f"unknown data kind {kind!r} (want cifar100|synthetic)")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_training_log(path: str, records, count_shape):
    n_blocks, n_experts = count_shape
    cols = ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc",
            "loss_bal", "loss_sp"]
    cols += [f"tokens_l{b}_e{e}" for b in range(n_blocks)
             for e in range(n_experts)]
    lines = [",".join(cols)]
    for rec in records:
        row = [_fmt(rec[k]) for k in cols[:8]]
        for per_block in rec["expert_counts"]:
            row.extend(str(c) for c in per_block)
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_train(cfg: RunConfig) -> int:
    train_ds, val_ds, n_classes = parse_data_spec(cfg.data, cfg.standardize)
    vcfg = cfg.vit_config(n_classes)
    out = cfg.out_dir()
    os.makedirs(out, exist_ok=True)
    model = build_model(vcfg)
    census = parameter_census(model)
    print(f"ffn={vcfg.ffn_kind} depth={vcfg.depth} d_model={vcfg.d_model} "
          f"d_ff={vcfg.d_ff} experts={vcfg.n_experts} top_k={vcfg.top_k}")
    print(f"parameters: {census['total']:,} ({census['total'] / 1e6:.2f} M)")
    sched = TrainSchedule(epochs=cfg.epochs, batch_size=cfg.batch,
                          peak_lr=cfg.lr,
                          label_smoothing=cfg.label_smoothing,
                          augment=cfg.augment)

    def progress(rec):
        print(f"epoch {rec['epoch']:3d}  loss {rec['train_loss']:.4f}  "
              f"acc {rec['train_acc']:.3f}  val_acc {rec['val_acc']:.3f}")

    log = train(model, train_ds.images, train_ds.labels, sched,
                val_images=val_ds.images if len(val_ds) else None,
                val_labels=val_ds.labels if len(val_ds) else None,
                shuffle_rng=Rng(vcfg.seed).split(),
                on_epoch=progress)
    ckpt_path = os.path.join(out, "checkpoint.npz")
    log_path = os.path.join(out, "training_log.csv")
    stats_path = os.path.join(out, "routing_stats.json")
    save_checkpoint(model, ckpt_path)
    _write_training_log(log_path, log.records, log.expert_count_shape)
    final = log.final()
    totals = [sum(block) for block in final["expert_counts"]] or [0]
    routing = {
        "final_epoch": final["epoch"],
        "expert_counts": final["expert_counts"],
        "load_fractions": [[c / max(1, t) for c in block]
                           for block, t in zip(final["expert_counts"], totals)],
        "loss_bal_per_epoch": [r["loss_bal"] for r in log.records],
        "loss_sp_per_epoch": [r["loss_sp"] for r in log.records],
    }
    with open(stats_path, "w") as fh:
        json.dump(routing, fh, indent=1)
    print(f"wrote {ckpt_path}, {log_path}, {stats_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str) -> int:
    model = load_checkpoint(checkpoint)
    train_ds, val_ds, n_classes = parse_data_spec(cfg.data, cfg.standardize)
    if model.config.classes != n_classes:
        raise CheckpointError(
            f"checkpoint has {model.config.classes} classes but the dataset "
            f"has {n_classes}")
    ds = val_ds if len(val_ds) else train_ds
    acc, loss = evaluate(model, ds.images, ds.labels)
    out = cfg.out_dir()
    os.makedirs(out, exist_ok=True)
    result = {"accuracy": acc, "loss": loss, "n_samples": len(ds)}
    with open(os.path.join(out, "eval.json"), "w") as fh:
        json.dump(result, fh, indent=1)
    print(f"accuracy {acc:.4f}  loss {loss:.6f}  ({len(ds)} samples)")
    return EXIT_OK


def _report_record(row: mm.MemoryReport) -> dict:
    return {
        "N_E": row.n_experts,
        "standard_MB": mm.truncate(row.standard_bytes / 1e6, 2),
        "butterfly_MB": mm.truncate(row.butterfly_bytes / 1e6, 3),
        "ratio": round(row.compression_ratio),
        "energy_mJ_standard": row.energy_joules_standard * 1e3,
        "energy_mJ_butterfly": row.energy_joules_butterfly * 1e3,
        "standard_bytes": row.standard_bytes,
        "butterfly_bytes": row.butterfly_bytes,
    }


def cmd_memory_report(args) -> int:
    spec = mm.ArchSpec(d_model=args.d_model, d_ff=args.d_ff,
                       depth=args.depth,
                       n_butterfly_layers=args.n_butterfly_layers,
                       bytes_per_angle=args.bytes_per_angle)
    if args.asymptote:
        print(f"asymptotic compression ratio: {mm.asymptotic_ratio(spec):g}")
        return EXIT_OK
    counts = [args.n_experts] if args.n_experts else mm.DEFAULT_EXPERT_SWEEP
    rows = [_report_record(r) for r in mm.report_rows(spec, counts)]
    header = (f"{'Experts':>7}  {'Standard(MB)':>12}  {'Butterfly(MB)':>13}  "
              f"{'Compression':>11}  {'E_std(mJ)':>10}  {'E_bfly(mJ)':>10}")
    print(header)
    for r in rows:
        print(f"{r['N_E']:>7}  {r['standard_MB']:>12.2f}  "
              f"{r['butterfly_MB']:>13.3f}  {r['ratio']:>10d}x  "
              f"{r['energy_mJ_standard']:>10.3f}  "
              f"{r['energy_mJ_butterfly']:>10.4f}")
    print(f"asymptotic ratio: {mm.asymptotic_ratio(spec):g}")
    if args.fit:
        print(f"\n{'Device':<24} {'budget(MB)':>11} {'butterfly':>10} "
              f"{'standard':>9}")
        for profile in mm.load_device_profiles():
            fit = mm.max_experts_fit(spec, profile)
            print(f"{profile.name:<24} "
                  f"{profile.memory_budget_bytes / 1e6:>11.1f} "
                  f"{fit.butterfly_max_experts:>10} "
                  f"{fit.standard_max_experts:>9}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        if args.format == "json":
            path = os.path.join(args.out, "memory_report.json")
            with open(path, "w") as fh:
                json.dump(rows, fh, indent=1)
        else:
            path = os.path.join(args.out, "memory_report.csv")
            cols = list(rows[0].keys())
            with open(path, "w") as fh:
                fh.write(",".join(cols) + "\n")
                for r in rows:
                    fh.write(",".join(_fmt(r[c]) for c in cols) + "\n")
        print(f"wrote {path}")
    return EXIT_OK


def cmd_similarity(cfg: RunConfig, checkpoint: str) -> int:
    model = load_checkpoint(checkpoint)
    if model.config.ffn_kind != "orbital":
        raise ConfigError(
            f"similarity needs an orbital checkpoint, got "
            f"{model.config.ffn_kind!r}")
    out = cfg.out_dir()
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "similarity.csv")
    n = model.config.n_experts
    lines = [",".join(["layer", "expert"] + [f"e{j}" for j in range(n)])]
    means = []
    for li, blk in enumerate(model.blocks):
        sim = expert_cosine_similarity(blk.ffn)
        off = sim[~np.eye(n, dtype=bool)]
        means.append(float(off.mean()))
        for i in range(n):
            lines.append(",".join([str(li), str(i)]
                                  + [repr(float(v)) for v in sim[i]]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for li, m in enumerate(means):
        print(f"layer {li}: off-diagonal mean cosine similarity {m:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--ffn", dest="ffn_kind",
                   choices=["orbital", "standard_moe", "dense"])
    p.add_argument("--experts", "--n-experts", dest="n_experts", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--heads", dest="n_heads", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--n-butterfly-layers", dest="n_butterfly_layers", type=int)
    p.add_argument("--lambda-bal", dest="lambda_bal", type=float)
    p.add_argument("--lambda-sp", dest="lambda_sp", type=float)
    p.add_argument("--smooth-2d", dest="smooth_2d", default=None,
                   action=argparse.BooleanOptionalAction,
                   help="grid-neighbor smoothness instead of 1D order")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    p.add_argument("--augment", default=None,
                   action=argparse.BooleanOptionalAction,
                   help="random pad-crop + horizontal flip during training")
    p.add_argument("--standardize", default=None,
                   action=argparse.BooleanOptionalAction,
                   help="per-channel standardization for the cifar100 path")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="cifar100:<dir> or synthetic:<spec>")
    p.add_argument("--out", help=f"output dir (default ${ENV_OUT_DIR} or runs)")
    p.add_argument("--format", choices=["csv", "json"])


def _run_config_from_args(args) -> RunConfig:
    overrides = {name: getattr(args, name, None) for name in _RUN_FIELDS}
    return load_run_config(getattr(args, "config", None), overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orbitmoe",
        description="Train, evaluate and analyze butterfly-rotation MoE "
                    "vision transformers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model, write artifacts")
    _add_run_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    _add_run_flags(p_eval)

    p_mem = sub.add_parser("memory-report",
                           help="analytical expert-memory table")
    p_mem.add_argument("--d-model", dest="d_model", type=int, default=256)
    p_mem.add_argument("--d-ff", dest="d_ff", type=int, default=1024)
    p_mem.add_argument("--depth", type=int, default=7)
    p_mem.add_argument("--n-butterfly-layers", dest="n_butterfly_layers",
                       type=int, default=2)
    p_mem.add_argument("--bytes-per-angle", dest="bytes_per_angle",
                       type=float, default=4.0)
    p_mem.add_argument("--experts", "--n-experts", dest="n_experts", type=int,
                       help="report a single expert count instead of the sweep")
    p_mem.add_argument("--asymptote", action="store_true",
                       help="print only the asymptotic compression ratio")
    p_mem.add_argument("--fit", action="store_true",
                       help="also print per-device expert-fit counts")
    p_mem.add_argument("--out")
    p_mem.add_argument("--format", choices=["csv", "json"], default="csv")

    p_sim = sub.add_parser("similarity",
                           help="expert cosine-similarity matrices")
    p_sim.add_argument("--checkpoint", required=True)
    p_sim.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(_run_config_from_args(args))
        if args.command == "eval":
            return cmd_eval(_run_config_from_args(args), args.checkpoint)
        if args.command == "memory-report":
            return cmd_memory_report(args)
        if args.command == "similarity":
            cfg = RunConfig(out=args.out)
            return cmd_similarity(cfg, args.checkpoint)
        parser.error(f"unknown command {args.command}")
    except DivergenceError as exc:
        print(f"error[diverged]: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FormatError, FileNotFoundError, OSError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, CheckpointError, ValueError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
