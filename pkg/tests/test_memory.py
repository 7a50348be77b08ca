import numpy as np
import pytest

from orbitmoe.memory_model import (DEFAULT_EXPERT_SWEEP, ArchSpec,
                                   DeviceProfile, asymptotic_ratio,
                                   butterfly_bytes, census_consistency,
                                   compression_ratio, dram_energy,
                                   load_device_profiles, max_experts_fit,
                                   memory_report, report_rows,
                                   standard_moe_bytes, truncate)
from orbitmoe.vit import ViTConfig, build_model, parameter_census

TABLE = {
    # experts: (standard MB, butterfly MB, ratio) as published
    2: (29.36, 0.434, 68),
    4: (58.72, 0.505, 116),
    8: (117.44, 0.649, 181),
    16: (234.88, 0.935, 251),
    32: (469.76, 1.509, 311),
    64: (939.52, 2.656, 354),
}


class TestExpertMemoryTable:
    @pytest.mark.parametrize("n", sorted(TABLE))
    def test_row(self, n):
        spec = ArchSpec(n_experts=n)
        std_mb, bfly_mb, ratio = TABLE[n]
        assert truncate(standard_moe_bytes(spec) / 1e6, 2) \
            == pytest.approx(std_mb, abs=1e-9)
        assert truncate(butterfly_bytes(spec) / 1e6, 3) \
            == pytest.approx(bfly_mb, abs=1e-9)
        assert round(compression_ratio(spec)) == ratio

    def test_zero_experts(self):
        assert standard_moe_bytes(ArchSpec(n_experts=0)) == 0.0

    def test_default_bytes_exactly(self):
        spec = ArchSpec(n_experts=8)
        assert standard_moe_bytes(spec) == 117_440_512
        # 7 layers x (substrate 51,773.44 B + 8 experts x 5,120 B of angles)
        assert butterfly_bytes(spec) == pytest.approx(7 * (51_773.44 + 40_960))

    def test_butterfly_is_affine_in_experts(self):
        vals = [butterfly_bytes(ArchSpec(n_experts=n)) for n in (1, 2, 3, 4)]
        diffs = np.diff(vals)
        assert np.allclose(diffs, diffs[0])

    def test_standard_is_linear_in_experts(self):
        vals = [standard_moe_bytes(ArchSpec(n_experts=n)) for n in (1, 2, 4)]
        assert vals[1] == 2 * vals[0] and vals[2] == 4 * vals[0]

    def test_compression_strictly_increasing_and_bounded(self):
        spec = ArchSpec()
        limit = asymptotic_ratio(spec)
        prev = 0.0
        for n in (1, 2, 4, 8, 64, 512, 4096):
            r = compression_ratio(spec.with_experts(n))
            assert r > prev
            assert r < limit
            prev = r


class TestAsymptote:
    def test_default_value(self):
        assert asymptotic_ratio(ArchSpec()) == pytest.approx(409.6)

    def test_large_expert_count_converges(self):
        spec = ArchSpec()
        r = compression_ratio(spec.with_experts(10 ** 6))
        assert abs(r - 409.6) / 409.6 < 1e-3

    def test_halving_stages_doubles_asymptote(self):
        assert asymptotic_ratio(ArchSpec(n_butterfly_layers=1)) \
            == pytest.approx(2 * asymptotic_ratio(ArchSpec(n_butterfly_layers=2)))


class TestDramEnergy:
    def test_zero(self):
        assert dram_energy(0) == 0.0

    def test_table_top_row(self):
        # 939.52 MB at 6.4 pJ/bit
        assert dram_energy(939.52e6) * 1e3 == pytest.approx(48.1, abs=0.1)

    def test_butterfly_large_model_below_point_two_mJ(self):
        assert dram_energy(2.656e6) < 0.2e-3

    def test_linear(self):
        assert dram_energy(2e6) == pytest.approx(2 * dram_energy(1e6))

    def test_custom_constant(self):
        assert dram_energy(1e6, pj_per_bit=3.2) \
            == pytest.approx(dram_energy(1e6) / 2)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            dram_energy(-1)


class TestDeviceFit:
    def test_closed_form_inversion(self):
        spec = ArchSpec(depth=1)
        dev = DeviceProfile("test", 1_000_000)
        fit = max_experts_fit(spec, dev)
        assert fit.butterfly_max_experts == 185

    def test_budget_below_substrate(self):
        spec = ArchSpec()  # depth 7: substrate alone is ~362 KB
        dev = DeviceProfile("tiny", 300_000)
        fit = max_experts_fit(spec, dev)
        assert fit.butterfly_max_experts == 0

    def test_monotone_in_budget(self):
        spec = ArchSpec()
        prev = -1
        for budget in (10 ** 5, 10 ** 6, 10 ** 7, 10 ** 9):
            fit = max_experts_fit(spec, DeviceProfile("d", budget))
            assert fit.butterfly_max_experts >= prev
            assert fit.butterfly_max_experts >= fit.standard_max_experts
            prev = fit.butterfly_max_experts

    def test_shipped_profiles_load(self):
        profiles = load_device_profiles()
        assert len(profiles) >= 4
        names = [p.name for p in profiles]
        assert len(set(names)) == len(names)
        assert all(p.memory_budget_bytes > 0 for p in profiles)


class TestCensusConsistency:
    @pytest.mark.parametrize("kind", ["orbital", "standard_moe", "dense"])
    def test_default_config_zero_deltas(self, kind):
        model = build_model(ViTConfig(ffn_kind=kind))
        spec = ArchSpec()
        report = census_consistency(parameter_census(model), spec, kind)
        assert report["consistent"], report

    @pytest.mark.parametrize("kind", ["orbital", "standard_moe", "dense"])
    def test_micro_config_zero_deltas(self, kind):
        cfg = ViTConfig(image_size=8, patch_size=4, d_model=8, d_ff=16,
                        n_heads=2, depth=2, n_experts=4, top_k=2, classes=3,
                        ffn_kind=kind)
        spec = ArchSpec(d_model=8, d_ff=16, n_experts=4, depth=2)
        report = census_consistency(parameter_census(build_model(cfg)),
                                    spec, kind)
        assert report["consistent"], report

    def test_wrong_depth_flagged(self):
        model = build_model(ViTConfig(depth=2, d_model=8, d_ff=16,
                                      image_size=8, patch_size=4, n_heads=2,
                                      n_experts=4, classes=3))
        spec = ArchSpec(d_model=8, d_ff=16, n_experts=4, depth=3)
        report = census_consistency(parameter_census(model), spec, "orbital")
        assert not report["consistent"]
        assert any(g["delta"] != 0 for g in report["groups"].values())


class TestReports:
    def test_sweep_rows(self):
        rows = report_rows(ArchSpec())
        assert [r.n_experts for r in rows] == list(DEFAULT_EXPERT_SWEEP)
        for row in rows:
            assert row.compression_ratio \
                == row.standard_bytes / row.butterfly_bytes
            assert row.energy_joules_standard \
                == pytest.approx(dram_energy(row.standard_bytes))

    def test_memory_report_fields(self):
        rep = memory_report(ArchSpec(n_experts=8))
        assert rep.asymptotic_ratio == pytest.approx(409.6)
        assert rep.standard_bytes > rep.butterfly_bytes > 0


def test_truncate():
    assert truncate(0.505774, 3) == 0.505
    assert truncate(0.649134, 3) == 0.649
    assert truncate(117.440512, 2) == 117.44
    assert truncate(1.9999, 2) == 1.99


def test_spec_validation():
    with pytest.raises(ValueError):
        ArchSpec(depth=0)
    with pytest.raises(ValueError):
        ArchSpec(n_experts=-1)
