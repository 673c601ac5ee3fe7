"""
Tests for Mahalanobis caliper matching, ATE estimation, balance diagnostics
and pair ranking.

Run with: pytest tests/test_matching.py -v
"""

import numpy as np
import pandas as pd
import pytest

from engine.matching import (
    INSUFFICIENT_SUPPORT,
    NO_SAMPLES,
    OK,
    SAMPLE_COLUMNS,
    MatchConfig,
    MatchPair,
    balance_report,
    build_samples,
    compare,
    estimate_ate,
    inverse_covariance,
    mahalanobis,
    match_samples,
    naive_difference,
    rank_pairs,
    select_groups,
    standardized_mean_difference,
)
from engine.tiers import HouseholdProfile
from tests.conftest import LEGACY, MODERN, make_record


def samples(rows: list[dict], start_id: int = 0) -> pd.DataFrame:
    """Sample frame with defaults for every column not given."""
    base = {
        "isp": "A", "year": 2016, "tier_bin": "30-50", "download_mbps": 40.0, "tier_mbps": 50.0,
        "rwnd_bytes": 500_000.0, "min_rtt_ms": 30.0, "mss_bytes": 1460.0, "client_limited_frac": 0.0,
        "os_class": MODERN, "peak_flag": False,
    }
    full = []
    for i, row in enumerate(rows):
        values = {**base, "sample_id": start_id + i, "household": f"h{start_id + i}", **row}
        full.append(values)
    return pd.DataFrame(full, columns=SAMPLE_COLUMNS)


def config(**overrides) -> MatchConfig:
    values = dict(treatment_isp="A", control_isp="B", continuous_covariates=("tier_mbps",),
                  exact_covariates=(), bootstrap=200)
    values.update(overrides)
    return MatchConfig(**values)


def random_store(seed: int = 0, per_isp: int = 80) -> pd.DataFrame:
    """Three ISPs in one bin with shifted covariates."""
    rng = np.random.default_rng(seed)
    frames = []
    for k, (isp, shift) in enumerate((("A", 0.0), ("B", 3.0), ("C", -2.0))):
        rows = [
            {"isp": isp, "household": f"{isp}{i}", "tier_mbps": 40 + shift + rng.normal(0, 4),
             "rwnd_bytes": 400_000 + rng.normal(0, 80_000), "download_mbps": 35 + shift + rng.normal(0, 3),
             "os_class": MODERN if rng.random() < 0.6 else LEGACY}
            for i in range(per_isp)
        ]
        frames.append(samples(rows, start_id=k * per_isp))
    return pd.concat(frames, ignore_index=True)


# =============================================================================
# Test Classes
# =============================================================================

class TestMatchConfig:

    @pytest.mark.parametrize("overrides", [
        {"caliper_sd": 0.0},
        {"caliper_sd": -1.0},
        {"control_isp": "A"},
        {"continuous_covariates": ()},
        {"continuous_covariates": ("speed",)},
        {"exact_covariates": ("tier_mbps",), "continuous_covariates": ("tier_mbps",)},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ValueError):
            config(**overrides)

    def test_label(self):
        assert config(tier_bin="30-50", year=2016).label == "A vs B [30-50]/2016"
        assert config(pair_id="custom").label == "custom"
        assert config(with_replacement=False).replacement_code == "nr"


class TestDistance:

    def test_mahalanobis_identity_is_euclidean(self):
        assert mahalanobis([0, 0], [3, 4], np.eye(2)) == pytest.approx(5.0)

    def test_singular_covariance_gets_ridge(self):
        z = np.column_stack([np.arange(10.0), np.arange(10.0)])
        inv = inverse_covariance(z)
        assert np.all(np.isfinite(inv))

    def test_correlated_covariates_hand_inverted(self):
        # unit variances, correlation 0.5: inverse is [[4, -2], [-2, 4]] / 3
        inv = np.linalg.inv(np.array([[1.0, 0.5], [0.5, 1.0]]))
        assert inv == pytest.approx(np.array([[4.0, -2.0], [-2.0, 4.0]]) / 3)
        assert mahalanobis([0, 0], [1.5, 0.5], inv) == pytest.approx(1.5275252316519465)
        assert mahalanobis([1.5, 0.5], [0, 0], inv) == pytest.approx(mahalanobis([0, 0], [1.5, 0.5], inv))

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        inv = inverse_covariance(rng.normal(size=(50, 3)))
        for _ in range(10):
            x, y = rng.normal(size=3), rng.normal(size=3)
            assert mahalanobis(x, y, inv) == pytest.approx(mahalanobis(y, x, inv))


class TestMatchSamples:
    """Greedy nearest admissible control, caliper and exact constraints."""

    def test_tie_goes_to_lower_control_id(self):
        treated = samples([{"tier_mbps": 30.0}])
        controls = samples([{"isp": "B", "tier_mbps": 31.0}, {"isp": "B", "tier_mbps": 29.0}], start_id=4)
        controls = controls.iloc[::-1].reset_index(drop=True)
        outcome = match_samples(treated, controls, config(caliper_sd=2.0))
        assert [p.control_id for p in outcome.pairs] == [4]

    def test_replacement_modes(self):
        treated = samples([{"tier_mbps": 30.0}, {"tier_mbps": 30.0}])
        controls = samples([{"isp": "B", "tier_mbps": 30.0}, {"isp": "B", "tier_mbps": 40.0}], start_id=2)

        with_r = match_samples(treated, controls, config())
        assert [p.control_id for p in with_r.pairs] == [2, 2]
        assert with_r.matched_controls == 1
        assert with_r.discard_rate == pytest.approx(0.25)

        without_r = match_samples(treated, controls, config(with_replacement=False))
        assert len(without_r.pairs) == 1
        assert without_r.discard_rate == pytest.approx(0.5)

    def test_pairs_respect_caliper_and_exact(self):
        store = random_store()
        treated, controls = store[store.isp == "A"], store[store.isp == "B"]
        cfg = config(continuous_covariates=("tier_mbps", "rwnd_bytes"), exact_covariates=("os_class",))
        outcome = match_samples(treated, controls, cfg)
        assert outcome.pairs
        t = treated.set_index("sample_id")
        c = controls.set_index("sample_id")
        pooled = pd.concat([treated, controls])
        for pair in outcome.pairs:
            assert t.loc[pair.treated_id, "os_class"] == c.loc[pair.control_id, "os_class"]
            for name in cfg.continuous_covariates:
                gap = abs(t.loc[pair.treated_id, name] - c.loc[pair.control_id, name])
                assert gap <= cfg.caliper_sd * pooled[name].std(ddof=1) + 1e-9

    def test_wider_caliper_matches_more_with_replacement(self):
        store = random_store(seed=4)
        treated, controls = store[store.isp == "A"], store[store.isp == "B"]
        counts = [len(match_samples(treated, controls, config(caliper_sd=c)).pairs) for c in (0.05, 0.1, 0.2, 0.5)]
        assert counts == sorted(counts)

    def test_seed_determinism(self):
        store = random_store(seed=2)
        treated, controls = store[store.isp == "A"], store[store.isp == "B"]
        cfg = config(with_replacement=False, seed=11)
        assert match_samples(treated, controls, cfg).pairs == match_samples(treated, controls, cfg).pairs

    def test_empty_group(self):
        outcome = compare(samples([{"tier_mbps": 30.0}]), samples([]), config())
        assert outcome.status == NO_SAMPLES
        assert outcome.discard_rate == 1.0
        assert outcome.ate_mbps is None

    def test_no_common_support(self):
        treated = samples([{"tier_mbps": 30.0}, {"tier_mbps": 30.5}])
        controls = samples([{"isp": "B", "tier_mbps": 60.0}, {"isp": "B", "tier_mbps": 61.0}], start_id=2)
        outcome = compare(treated, controls, config())
        assert outcome.pairs == []
        assert outcome.status == INSUFFICIENT_SUPPORT
        assert outcome.discard_rate == 1.0

    def test_constant_covariate_dropped(self):
        treated = samples([{"tier_mbps": 30.0, "rwnd_bytes": 1.0}, {"tier_mbps": 31.0, "rwnd_bytes": 1.0}])
        controls = samples([{"isp": "B", "tier_mbps": 30.2, "rwnd_bytes": 1.0}], start_id=2)
        outcome = match_samples(treated, controls, config(caliper_sd=1.0, continuous_covariates=("tier_mbps", "rwnd_bytes")))
        assert outcome.dropped_covariates == ["rwnd_bytes"]
        assert outcome.pairs


class TestScenarios:
    """Small hand-built stores with a known answer."""

    @pytest.mark.parametrize("with_replacement", [True, False])
    def test_match_against_own_copy(self, with_replacement):
        rng = np.random.default_rng(9)
        treated = samples([
            {"tier_mbps": 40 + rng.normal(0, 5), "rwnd_bytes": 400_000 + rng.normal(0, 50_000),
             "download_mbps": 30 + rng.normal(0, 4)}
            for _ in range(40)
        ])
        controls = treated.assign(isp="B", sample_id=treated["sample_id"] + 40,
                                  household=[f"h{i + 40}" for i in range(40)])
        cfg = config(caliper_sd=1e-9, continuous_covariates=("tier_mbps", "rwnd_bytes"),
                     with_replacement=with_replacement)
        outcome = compare(treated, controls, cfg)
        assert all(p.control_id == p.treated_id + 40 and p.distance == 0.0 for p in outcome.pairs)
        assert len(outcome.pairs) == 40
        assert outcome.ate_mbps == pytest.approx(0.0, abs=1e-12)
        assert outcome.discard_rate == 0.0
        assert [row.smd_after for row in outcome.balance] == [pytest.approx(0.0, abs=1e-12)] * 2

    def test_discard_with_unmatched_tails(self):
        # 19 exact twins; five treated far above and five controls far below every other sample
        twins = [30.0 + i for i in range(19)]
        treated = samples([{"tier_mbps": t} for t in twins + [500.0 + i for i in range(5)]])
        controls = samples([{"isp": "B", "tier_mbps": t} for t in twins + [-400.0 - i for i in range(5)]],
                           start_id=24)
        for with_replacement in (True, False):
            outcome = match_samples(treated, controls, config(with_replacement=with_replacement))
            assert len(outcome.pairs) == 19
            assert outcome.discard_rate == pytest.approx(10 / 48)
            assert outcome.discard_rate == pytest.approx(0.208, abs=0.05)

    @pytest.mark.parametrize("with_replacement", [True, False])
    def test_matching_shrinks_confounded_gap(self, with_replacement):
        # treatment sits mostly on the slower tier and is 3.5 Mbps slower at equal tier
        treated = samples([{"tier_mbps": t, "download_mbps": 0.8 * t - 3.5} for t in [30.0] * 15 + [45.0] * 5])
        controls = samples([{"isp": "B", "tier_mbps": t, "download_mbps": 0.8 * t} for t in [30.0] * 6 + [45.0] * 10],
                           start_id=20)
        outcome = compare(treated, controls, config(with_replacement=with_replacement))
        assert outcome.naive_diff_mbps == pytest.approx(-8.0)
        assert outcome.ate_mbps == pytest.approx(-3.5)
        assert abs(outcome.ate_mbps) < abs(outcome.naive_diff_mbps)


class TestEstimation:

    def pairs(self, diffs):
        return [MatchPair(i, 100 + i, 0.0, 10.0 + d, 10.0) for i, d in enumerate(diffs)]

    def test_no_pairs(self):
        estimate = estimate_ate([])
        assert (estimate.ate_mbps, estimate.ci95, estimate.n_pairs) == (None, None, 0)

    def test_single_pair_has_no_ci(self):
        estimate = estimate_ate(self.pairs([2.5]))
        assert estimate.ate_mbps == pytest.approx(2.5)
        assert estimate.ci95 is None

    def test_ci_contains_estimate(self):
        rng = np.random.default_rng(0)
        estimate = estimate_ate(self.pairs(rng.normal(3, 2, 80)), bootstrap=500, seed=1)
        low, high = estimate.ci95
        assert low <= estimate.ate_mbps <= high
        assert high - low < 2.0

    def test_constant_differences(self):
        estimate = estimate_ate(self.pairs([1.5, 1.5, 1.5]))
        assert estimate.ci95 == (pytest.approx(1.5), pytest.approx(1.5))

    def test_bootstrap_seeded(self):
        diffs = self.pairs([1, 4, -2, 3, 0, 5])
        assert estimate_ate(diffs, seed=3).ci95 == estimate_ate(diffs, seed=3).ci95

    @pytest.mark.parametrize("t,c,expected", [
        ([1, 2, 3], [1, 2, 3], 0.0),
        ([2, 4], [0, 2], 2 ** 0.5),
        ([5, 5], [5, 5], 0.0),
        ([6, 6], [5, 5], None),
        ([], [1, 2], None),
    ])
    def test_standardized_mean_difference(self, t, c, expected):
        value = standardized_mean_difference(np.asarray(t, dtype=float), np.asarray(c, dtype=float))
        assert value == (pytest.approx(expected) if expected is not None else None)

    def test_naive_difference_is_household_weighted(self):
        treated = samples([
            {"household": "a", "download_mbps": 10.0}, {"household": "a", "download_mbps": 10.0},
            {"household": "a", "download_mbps": 10.0}, {"household": "b", "download_mbps": 30.0},
        ])
        controls = samples([{"isp": "B", "household": "c", "download_mbps": 15.0}], start_id=4)
        assert naive_difference(treated, controls) == pytest.approx(5.0)

    def test_balance_improves(self):
        rng = np.random.default_rng(5)
        treated = samples([{"tier_mbps": 30 + rng.normal(0, 1)} for _ in range(60)])
        controls = samples(
            [{"isp": "B", "tier_mbps": 30 + rng.normal(0, 1)} for _ in range(60)]
            + [{"isp": "B", "tier_mbps": 45 + rng.normal(0, 1)} for _ in range(60)],
            start_id=60,
        )
        outcome = match_samples(treated, controls, config())
        [row] = balance_report(treated, controls, outcome.pairs, ["tier_mbps"])
        assert abs(row.smd_before) > 1.0
        assert abs(row.smd_after) < 0.25
        assert row.p_value_after > 0.05


class TestSamples:

    def profile(self, ip, eligible=True, tier_bin="30-50"):
        return HouseholdProfile(
            client_ip=ip, isp="ISP-A", country="US", year=2016, annual_test_count=3,
            off_peak_test_count=3, max_speed_mbps=40.0, rho=-0.5, single_household=True,
            eligible=eligible, tier_mbps=45.0, tier_bin=tier_bin,
        )

    @pytest.fixture
    def records(self):
        return [
            make_record("10.0.0.1", day=0, speed=40.0, rwnd=100.0),
            make_record("10.0.0.1", day=1, speed=44.0, rwnd=300.0, hour=20),
            make_record("10.0.0.1", day=2, speed=42.0, rwnd=200.0, hour=21),
            make_record("10.0.0.2", day=0, speed=10.0),
        ]

    def test_test_unit(self, records):
        store = build_samples(records, [self.profile("10.0.0.1"), self.profile("10.0.0.2", eligible=False)])
        assert list(store.columns) == SAMPLE_COLUMNS
        assert store["sample_id"].tolist() == [0, 1, 2]
        assert set(store["household"]) == {"10.0.0.1"}

    def test_household_unit(self, records):
        store = build_samples(records, [self.profile("10.0.0.1")], unit="household")
        assert len(store) == 1
        row = store.iloc[0]
        assert row["download_mbps"] == pytest.approx(42.0)
        assert row["rwnd_bytes"] == pytest.approx(200.0)
        assert bool(row["peak_flag"]) is True
        assert row["tier_mbps"] == 45.0

    def test_bad_unit(self, records):
        with pytest.raises(ValueError):
            build_samples(records, [], unit="month")

    def test_select_groups(self):
        store = random_store()
        treated, controls = select_groups(store, config(treatment_isp="A", control_isp="C", tier_bin="30-50"))
        assert set(treated["isp"]) == {"A"} and set(controls["isp"]) == {"C"}
        treated, _ = select_groups(store, config(tier_bin="75-100"))
        assert treated.empty


class TestRankPairs:

    @pytest.fixture(scope="class")
    def store(self):
        return random_store(seed=9)

    @pytest.fixture(scope="class")
    def configs(self):
        return [
            MatchConfig("A", "B", "30-50", continuous_covariates=("tier_mbps", "rwnd_bytes"), bootstrap=200),
            MatchConfig("C", "A", "30-50", continuous_covariates=("tier_mbps", "rwnd_bytes"), bootstrap=200),
            MatchConfig("A", "D", "30-50", continuous_covariates=("tier_mbps", "rwnd_bytes"), bootstrap=200),
            MatchConfig("B", "C", "30-50", continuous_covariates=("tier_mbps", "rwnd_bytes"), bootstrap=200),
        ]

    def test_sorted_by_naive_with_missing_last(self, store, configs):
        rows = rank_pairs(configs, store)
        naive = [r.naive_diff for r in rows]
        assert naive[-1] is None and rows[-1].status == NO_SAMPLES
        assert naive[:-1] == sorted(naive[:-1])
        assert {r.status for r in rows[:-1]} == {OK}

    def test_workers_give_identical_rows(self, store, configs):
        sequential = [r.to_row() for r in rank_pairs(configs, store, workers=1)]
        parallel = [r.to_row() for r in rank_pairs(configs, store, workers=4)]
        assert sequential == parallel

    def test_both_replacement_modes_reported(self, store, configs):
        row = next(r for r in rank_pairs(configs, store) if r.pair_id == "A vs B [30-50]")
        assert row.ate_r is not None and row.ate_nr is not None
        assert row.discard_r >= 0 and row.discard_nr >= 0


# =============================================================================
# Run with: pytest tests/test_matching.py -v
# =============================================================================

if __name__ == "__main__":
    pytest.main([__file__, "-v"])
