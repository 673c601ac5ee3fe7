"""
Tests for the synthetic generator: determinism, ground truth, NAT sharing and
spec validation.

Run with: pytest tests/test_synth.py -v
"""

import json
from collections import Counter

import numpy as np
import pytest
from pydantic import ValidationError

from engine.config import ConfigError
from engine.ingest import local_hour_for
from engine.synth import (
    CountSpec,
    InfeasibleSpecError,
    IspSpec,
    SynthSpec,
    _group_ip,
    generate,
    load_synth_spec,
    write_truth,
)
from engine.tiers import classify_household, group_by_ip, pearson_rho
from tests.conftest import two_isp_spec

SPEC_TEXT = """\
seed = 5
year = 2015
months = 3

[tests]
distribution = "fixed"
mean = 12

[[isp]]
name = "ISP-A"
country = "au"
households = 4
tier_mix = { "30-50" = 0.5, "75-100" = 0.5 }
os_mix = { ModernAutotuning = 0.75, LegacyNoAutotuning = 0.25 }
effect_mbps = 1.5
"""


class TestGenerate:

    def test_deterministic(self):
        spec = two_isp_spec(households=5, tests=10)
        assert generate(spec).records == generate(spec).records

    def test_seed_changes_output(self):
        a = generate(two_isp_spec(seed=1, households=5, tests=10)).records
        b = generate(two_isp_spec(seed=2, households=5, tests=10)).records
        assert a != b

    def test_households_independent_of_count(self):
        small = generate(two_isp_spec(households=5, tests=10))
        large = generate(two_isp_spec(households=8, tests=10))
        assert small.truth.households[:5] == large.truth.households[:5]
        assert small.records[:50] == large.records[:50]

    def test_truth_matches_records(self):
        result = generate(two_isp_spec(households=6, tests=10, effect=2.5))
        assert result.truth.effects == {"ISP-A": 2.5, "ISP-B": 0.0}
        assert len(result.truth.households) == 12
        assert len(result.records) == 120
        assert [r.isp for r in result.records[:60]] == ["ISP-A"] * 60

    def test_speed_capped_by_tier(self):
        result = generate(two_isp_spec(households=10, tests=20))
        tiers = {h.ip: h.tier_mbps for h in result.truth.households}
        assert all(0.05 <= r.download_mbps <= tiers[r.client_ip] for r in result.records)

    def test_local_hours_consistent(self):
        spec = two_isp_spec(households=3, tests=30)
        spec.utc_offset_minutes = 600
        for record in generate(spec).records:
            assert record.local_hour == local_hour_for(record.timestamp_utc, 600)
            assert record.year == 2016

    def test_no_peak_tests(self):
        spec = two_isp_spec(households=3, tests=30)
        spec.peak_fraction = 0.0
        assert not any(r.peak for r in generate(spec).records)

    def test_outliers_can_exceed_tier(self):
        spec = two_isp_spec(households=3, tests=40)
        spec.outlier_rate = 1.0
        spec.outlier_multiplier = 3.0
        assert max(r.download_mbps for r in generate(spec).records) > 50.0

    def test_no_isp_is_infeasible(self):
        with pytest.raises(InfeasibleSpecError):
            generate(SynthSpec(seed=1))


class TestNatSharing:

    @pytest.fixture(scope="class")
    def result(self):
        spec = SynthSpec(
            seed=8,
            tests=CountSpec(distribution="fixed", mean=30),
            isp=[IspSpec(name="ISP-A", households=40, tier_mix={"20-25": 0.5, "75-100": 0.5},
                         nat_group_size={"4": 1.0})],
        )
        spec.congestion.slack_lambda = 20.0
        spec.congestion.volume_lambda = 4.0
        spec.congestion.volume_ref = 25.0
        return generate(spec)

    def test_groups_share_ip(self, result):
        by_ip = result.truth.by_ip()
        assert len(by_ip) == 10
        assert all(len(group) == 4 and group[0].nat_size == 4 for group in by_ip.values())

    def test_mixed_tier_ips_correlate_positively(self, result):
        tiers = {ip: {h.tier_bin for h in group} for ip, group in result.truth.by_ip().items()}
        rhos = [
            pearson_rho([t.download_mbps for t in tests], [t.congestion_count for t in tests])
            for ip, tests in group_by_ip(result.records).items()
            if len(tiers[ip]) == 2
        ]
        assert rhos
        assert sum(rhos) / len(rhos) > 0

    def test_mixing_flips_household_flag(self):
        # two homes with a 4x tier ratio behind one IP look shared in >= 90% of draws
        trials = []
        for seed in range(100):
            spec = SynthSpec(
                seed=seed,
                tests=CountSpec(distribution="fixed", mean=30),
                isp=[IspSpec(name="ISP-A", households=2, tier_mix={"20-25": 0.5, "75-100": 0.5},
                             nat_group_size={"2": 1.0})],
            )
            spec.congestion.slack_lambda = 20.0
            spec.congestion.volume_lambda = 4.0
            spec.congestion.volume_ref = 25.0
            result = generate(spec)
            if len({h.tier_bin for h in result.truth.households}) < 2:
                continue
            rho = pearson_rho([r.download_mbps for r in result.records], [r.congestion_count for r in result.records])
            trials.append(classify_household(rho))
            if len(trials) == 20:
                break
        assert len(trials) == 20
        assert trials.count(False) >= 18


class TestPopulation:
    """Large synthetic populations against their spec."""

    def test_tier_marginal_at_10k_households(self):
        mix = {"8-12": 0.2, "30-50": 0.5, "75-100": 0.3}
        spec = SynthSpec(seed=11, tests=CountSpec(distribution="fixed", mean=1),
                         isp=[IspSpec(name="ISP-A", households=10_000, tier_mix=mix)])
        households = generate(spec).truth.households
        counts = Counter(h.tier_bin for h in households)
        tv = 0.5 * sum(abs(counts[label] / len(households) - share) for label, share in mix.items())
        assert len(households) == 10_000
        assert set(counts) == set(mix)
        assert tv <= 0.05

    def test_naive_difference_unbiased_on_balanced_covariates(self):
        result = generate(two_isp_spec(seed=12, households=400, tests=10, effect=1.5))
        means = {"ISP-A": [], "ISP-B": []}
        for ip, tests in group_by_ip(result.records).items():
            means[tests[0].isp].append(np.mean([t.download_mbps for t in tests]))
        a, b = np.asarray(means["ISP-A"]), np.asarray(means["ISP-B"])
        naive = a.mean() - b.mean()
        se = np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
        assert a.size == b.size == 400
        assert abs(naive - result.truth.effects["ISP-A"]) <= 3 * se


class TestAddresses:

    @pytest.mark.parametrize("isp_index,group,ip", [
        (0, 0, "10.0.0.0"),
        (0, 258, "10.0.1.2"),
        (3, 65535, "10.3.255.255"),
        (256, 0, "11.0.0.0"),
        (300, 7, "11.44.0.7"),
    ])
    def test_group_ip(self, isp_index, group, ip):
        assert _group_ip(isp_index, group) == ip

    def test_many_isps_get_distinct_prefixes(self):
        spec = SynthSpec(seed=2, tests=CountSpec(distribution="fixed", mean=1),
                         isp=[IspSpec(name=f"ISP-{i}", households=1) for i in range(300)])
        ips = [h.ip for h in generate(spec).truth.households]
        assert len(set(ips)) == 300

    @pytest.mark.parametrize("isp_index,group", [(0, 1 << 16), (214 * 256, 0)])
    def test_address_space_exhausted(self, isp_index, group):
        with pytest.raises(InfeasibleSpecError):
            _group_ip(isp_index, group)


class TestSpecValidation:

    @pytest.mark.parametrize("overrides", [
        {"tier_mix": {"31-50": 1.0}},
        {"os_mix": {"ModernAutotuning": 0.5}},
        {"os_mix": {"BeOS": 1.0}},
        {"nat_group_size": {"0": 1.0}},
        {"households": 0},
    ])
    def test_invalid_isp(self, overrides):
        with pytest.raises(ValidationError):
            SynthSpec(isp=[{"name": "X", "households": 3, **overrides}])

    def test_duplicate_names(self):
        with pytest.raises(ValidationError):
            SynthSpec(isp=[{"name": "X", "households": 1}, {"name": "X", "households": 1}])

    def test_pareto_counts_bounded(self):
        counts = CountSpec(distribution="pareto", minimum=5, maximum=200, pareto_alpha=1.1)
        rng = np.random.default_rng(0)
        draws = [counts.draw(rng) for _ in range(2000)]
        assert min(draws) >= 5 and max(draws) <= 200

    def test_load_spec_file(self, tmp_path):
        path = tmp_path / "spec.cfg"
        path.write_text(SPEC_TEXT)
        spec = load_synth_spec(path)
        assert spec.seed == 5
        assert spec.isps[0].effect_mbps == 1.5
        records = generate(spec).records
        assert len(records) == 48
        assert {r.country for r in records} == {"AU"}
        assert {r.year_month for r in records} <= {"2015-01", "2015-02", "2015-03"}

    def test_load_spec_unknown_key(self, tmp_path):
        path = tmp_path / "spec.cfg"
        path.write_text(SPEC_TEXT + "colour = \"blue\"\n")
        with pytest.raises(ConfigError, match="colour"):
            load_synth_spec(path)

    def test_write_truth(self, tmp_path):
        truth = generate(two_isp_spec(households=2, tests=5)).truth
        data = json.loads(write_truth(truth, tmp_path / "truth.json").read_text())
        assert data["effects"] == {"ISP-A": 2.0, "ISP-B": 0.0}
        assert len(data["households"]) == 4


# =============================================================================
# Run with: pytest tests/test_synth.py -v
# =============================================================================

if __name__ == "__main__":
    pytest.main([__file__, "-v"])
