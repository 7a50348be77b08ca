"""Analytical expert-memory, compression, energy and device-fit calculator.

Accounting conventions (chosen so the analytical counts agree exactly with
``vit.parameter_census`` on a constructed model):

* Standard MoE expert bytes: depth * N_E * matrices_per_expert (up + down)
  * d_ff * d_model * precision_bytes.
* Butterfly expert bytes per layer: one ternary substrate at
  substrate_bits_per_weight / 8 bytes per weight (an accounting figure; the
  file format stores 1.6 bits/weight) plus N_E * bytes_per_angle *
  n_butterfly_layers * (d_model' + d_ff') / 2 for the rotation angles, where
  d' is the width padded to the next power of two.
* The shared down-projection and the gate count as backbone, not expert
  memory.
* MB means 10^6 bytes everywhere.

All functions are pure and thread-safe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources

from .butterfly import next_pow2

__all__ = ["ArchSpec", "DeviceProfile", "MemoryReport", "DeviceFit",
           "standard_moe_bytes", "butterfly_bytes", "compression_ratio",
           "asymptotic_ratio", "dram_energy", "max_experts_fit",
           "memory_report", "report_rows", "census_consistency",
           "load_device_profiles", "truncate", "DEFAULT_EXPERT_SWEEP",
           "DRAM_PJ_PER_BIT"]

DRAM_PJ_PER_BIT = 6.4
DEFAULT_EXPERT_SWEEP = (2, 4, 8, 16, 32, 64)


@dataclass(frozen=True)
class ArchSpec:
    d_model: int = 256
    d_ff: int = 1024
    n_experts: int = 8
    n_butterfly_layers: int = 2
    depth: int = 7
    bytes_per_angle: float = 4.0
    substrate_bits_per_weight: float = 1.58
    standard_precision_bytes: float = 4.0
    standard_matrices_per_expert: int = 2

    def __post_init__(self):
        for name in ("d_model", "d_ff", "n_butterfly_layers", "depth",
                     "bytes_per_angle", "substrate_bits_per_weight",
                     "standard_precision_bytes", "standard_matrices_per_expert"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_experts < 0:
            raise ValueError("n_experts must be >= 0")

    def with_experts(self, n: int) -> "ArchSpec":
        return replace(self, n_experts=n)

    @property
    def angles_per_expert_per_layer(self) -> int:
        return self.n_butterfly_layers * (next_pow2(self.d_model) // 2
                                          + next_pow2(self.d_ff) // 2)

    @property
    def substrate_bytes_per_layer(self) -> float:
        return (self.substrate_bits_per_weight / 8.0) * self.d_ff * self.d_model


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    memory_budget_bytes: int
    source: str = ""

    def __post_init__(self):
        if self.memory_budget_bytes <= 0:
            raise ValueError("memory_budget_bytes must be > 0")


@dataclass(frozen=True)
class MemoryReport:
    n_experts: int
    standard_bytes: float
    butterfly_bytes: float
    compression_ratio: float
    asymptotic_ratio: float
    energy_joules_standard: float
    energy_joules_butterfly: float


@dataclass(frozen=True)
class DeviceFit:
    device: DeviceProfile
    butterfly_max_experts: int
    standard_max_experts: int


def standard_moe_bytes(spec: ArchSpec) -> float:
    """Expert bytes for independently stored full-precision experts."""
    return (spec.depth * spec.n_experts * spec.standard_matrices_per_expert
            * spec.d_ff * spec.d_model * spec.standard_precision_bytes)


def butterfly_bytes(spec: ArchSpec) -> float:
    """Expert bytes for the shared-substrate + per-expert-angles layout."""
    per_expert = spec.bytes_per_angle * spec.angles_per_expert_per_layer
    return spec.depth * (spec.substrate_bytes_per_layer
                         + spec.n_experts * per_expert)


def compression_ratio(spec: ArchSpec) -> float:
    return standard_moe_bytes(spec) / butterfly_bytes(spec)


def asymptotic_ratio(spec: ArchSpec) -> float:
    """Limit of compression_ratio as the expert count grows without bound.

    The fixed substrate vanishes relative to N_E, leaving the per-expert
    byte ratio; 409.6 for the default geometry.
    """
    per_expert_standard = (spec.standard_matrices_per_expert
                           * spec.standard_precision_bytes
                           * spec.d_ff * spec.d_model)
    per_expert_butterfly = spec.bytes_per_angle * spec.angles_per_expert_per_layer
    return per_expert_standard / per_expert_butterfly


def dram_energy(n_bytes: float, pj_per_bit: float = DRAM_PJ_PER_BIT) -> float:
    """Joules to move ``n_bytes`` through DRAM once at pj_per_bit."""
    if n_bytes < 0:
        raise ValueError("bytes must be >= 0")
    return n_bytes * 8.0 * pj_per_bit * 1e-12


def max_experts_fit(spec: ArchSpec, device: DeviceProfile) -> DeviceFit:
    """Largest expert counts whose expert memory fits the device budget.

    Binary search per variant; 0 when even the fixed substrate does not fit.
    """
    budget = device.memory_budget_bytes

    def fits(fn, n):
        return fn(spec.with_experts(n)) <= budget

    def search(fn):
        if not fits(fn, 0):
            return 0
        hi = 1
        while fits(fn, hi):
            hi *= 2
            if hi > 10 ** 12:
                break
        lo = hi // 2
        while lo < hi - 1:
            mid = (lo + hi) // 2
            if fits(fn, mid):
                lo = mid
            else:
                hi = mid
        return lo

    return DeviceFit(device, search(butterfly_bytes),
                     search(standard_moe_bytes))


def memory_report(spec: ArchSpec) -> MemoryReport:
    """All figures for one expert count."""
    sb = standard_moe_bytes(spec)
    bb = butterfly_bytes(spec)
    return MemoryReport(
        n_experts=spec.n_experts,
        standard_bytes=sb,
        butterfly_bytes=bb,
        compression_ratio=sb / bb,
        asymptotic_ratio=asymptotic_ratio(spec),
        energy_joules_standard=dram_energy(sb),
        energy_joules_butterfly=dram_energy(bb),
    )


def report_rows(spec: ArchSpec, expert_counts=DEFAULT_EXPERT_SWEEP):
    """One MemoryReport per expert count in the sweep."""
    return [memory_report(spec.with_experts(n)) for n in expert_counts]


def truncate(x: float, decimals: int) -> float:
    """Chop (not round) to ``decimals`` places; the published expert-memory
    table uses truncation, e.g. 0.505774 MB prints as 0.505."""
    scale = 10 ** decimals
    return math.floor(x * scale) / scale


def census_consistency(census: dict, spec: ArchSpec, ffn_kind: str) -> dict:
    """Cross-check the analytical expert counts against a model census.

    ``census`` comes from ``vit.parameter_census``. Returns
    {"consistent": bool, "groups": {name: {expected, actual, delta}}}.
    """
    expected = {}
    if ffn_kind == "orbital":
        expected["angles"] = (spec.depth * spec.n_experts
                              * spec.angles_per_expert_per_layer)
        expected["substrate"] = spec.depth * spec.d_ff * spec.d_model
    elif ffn_kind == "standard_moe":
        expected["experts"] = (spec.depth * spec.n_experts
                               * spec.standard_matrices_per_expert
                               * spec.d_ff * spec.d_model)
    elif ffn_kind == "dense":
        expected["ffn"] = spec.depth * 2 * spec.d_ff * spec.d_model
    else:
        raise ValueError(f"unknown ffn kind {ffn_kind!r}")
    groups = {}
    consistent = True
    for name, want in expected.items():
        got = int(census.get(name, 0))
        delta = got - want
        consistent &= delta == 0
        groups[name] = {"expected": int(want), "actual": got, "delta": delta}
    return {"consistent": consistent, "groups": groups}


def load_device_profiles() -> list[DeviceProfile]:
    """Editable device budget data shipped with the package.

    Budgets are illustrative figures from vendor datasheets (see the source
    notes), not measured or authoritative values.
    """
    raw = json.loads(resources.files("orbitmoe")
                     .joinpath("device_profiles.json").read_text())
    return [DeviceProfile(**entry) for entry in raw]
