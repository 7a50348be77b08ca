#!/usr/bin/env python3
"""Expert-memory accounting: the sub-linear scaling table, the asymptotic
compression bound, DRAM energy, and device-fit counts."""

from orbitmoe import (ArchSpec, asymptotic_ratio, butterfly_bytes,
                      compression_ratio, dram_energy, load_device_profiles,
                      max_experts_fit, report_rows, standard_moe_bytes)
from orbitmoe.memory_model import truncate

spec = ArchSpec()  # d_model=256, d_ff=1024, depth=7, 2 butterfly stages

print("expert memory (MB = 10^6 bytes):")
print(f"{'experts':>8} {'standard':>10} {'butterfly':>10} {'ratio':>6}")
for row in report_rows(spec):
    print(f"{row.n_experts:>8} {truncate(row.standard_bytes / 1e6, 2):>10.2f} "
          f"{truncate(row.butterfly_bytes / 1e6, 3):>10.3f} "
          f"{round(row.compression_ratio):>5d}x")

print("\nwhy sub-linear: the substrate is paid once per layer, each extra")
print("expert costs only", spec.bytes_per_angle * spec.angles_per_expert_per_layer,
      "bytes of angles per layer")
print("asymptotic compression ratio:", asymptotic_ratio(spec))

mb64 = butterfly_bytes(spec.with_experts(64))
std64 = standard_moe_bytes(spec.with_experts(64))
print(f"\nDRAM energy per full weight pass at 6.4 pJ/bit:")
print(f"  standard, 64 experts:  {dram_energy(std64) * 1e3:8.3f} mJ")
print(f"  butterfly, 64 experts: {dram_energy(mb64) * 1e3:8.4f} mJ")

print("\nhow many experts fit on a device budget:")
for profile in load_device_profiles():
    fit = max_experts_fit(spec, profile)
    print(f"  {profile.name:<24} {profile.memory_budget_bytes / 1e6:9.1f} MB: "
          f"butterfly {fit.butterfly_max_experts:>7}, "
          f"standard {fit.standard_max_experts}")
