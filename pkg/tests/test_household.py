"""
Tests for household aggregation and the naive baselines.

Run with: pytest tests/test_household.py -v
"""

import pytest

from engine.household import (
    aggregate_monthly,
    modal_os_class,
    monthly_median_series,
    test_count_ccdf,
    tier_distribution,
)
from engine.ingest import OsClass
from engine.tiers import HouseholdProfile
from tests.conftest import make_record

MODERN = OsClass.MODERN_AUTOTUNING
LEGACY = OsClass.LEGACY_NO_AUTOTUNING


def profile(ip: str, isp: str, tier_bin: str | None, eligible: bool = True) -> HouseholdProfile:
    return HouseholdProfile(
        client_ip=ip, isp=isp, country="US", year=2016, annual_test_count=30,
        off_peak_test_count=20, max_speed_mbps=40.0, rho=-0.5, single_household=True,
        eligible=eligible, tier_bin=tier_bin, tier_mbps=40.0 if tier_bin else None,
    )


class TestModalOsClass:

    def test_most_frequent(self):
        assert modal_os_class([LEGACY, LEGACY, MODERN]) is LEGACY

    def test_tie_follows_precedence(self):
        assert modal_os_class([OsClass.OTHER, MODERN]) is MODERN
        assert modal_os_class(["Other", "LegacyNoAutotuning"]) is LEGACY

    def test_empty(self):
        assert modal_os_class([]) is OsClass.OTHER


class TestAggregateMonthly:
    """One entry per (ip, local year-month)."""

    @pytest.fixture
    def records(self):
        return [
            # 10.0.0.2: March 10, 20, 60 (one peak) and April 30
            make_record("10.0.0.2", day=0, speed=10.0),
            make_record("10.0.0.2", day=1, speed=20.0, hour=20, os_class=LEGACY),
            make_record("10.0.0.2", day=2, speed=60.0, os_class=LEGACY),
            make_record("10.0.0.2", day=31, speed=30.0),
            # 10.0.0.1: March only
            make_record("10.0.0.1", day=5, speed=50.0, rtt=10.0),
            make_record("10.0.0.1", day=6, speed=70.0, rtt=20.0),
        ]

    def test_order_and_keys(self, records):
        months = aggregate_monthly(records)
        assert [(m.client_ip, m.year_month) for m in months] == [
            ("10.0.0.1", "2016-03"),
            ("10.0.0.2", "2016-03"),
            ("10.0.0.2", "2016-04"),
        ]

    def test_mean_statistic(self, records):
        march = aggregate_monthly(records)[1]
        assert march.test_count == 3
        assert march.mean_speed_mbps == pytest.approx(30.0)
        assert march.off_peak_test_count == 2
        assert march.modal_os_class is LEGACY

    def test_median_statistic(self, records):
        march = aggregate_monthly(records, statistic="median")[1]
        assert march.mean_speed_mbps == pytest.approx(20.0)

    def test_covariate_means(self, records):
        first = aggregate_monthly(records)[0]
        assert first.mean_min_rtt_ms == pytest.approx(15.0)
        assert first.mean_speed_mbps == pytest.approx(60.0)

    def test_empty(self):
        assert aggregate_monthly([]) == []

    def test_bad_statistic(self, records):
        with pytest.raises(ValueError):
            aggregate_monthly(records, statistic="max")


class TestMonthlyMedianSeries:

    def test_median_across_households_not_tests(self):
        # ten slow tests from one household must not dominate
        records = [make_record("10.0.0.1", day=d, speed=10.0) for d in range(10)]
        records += [make_record("10.0.0.2", speed=50.0), make_record("10.0.0.3", speed=60.0)]
        points = monthly_median_series(aggregate_monthly(records), "ISP-A")
        assert len(points) == 1
        assert points[0].median_mbps == pytest.approx(50.0)
        assert points[0].households == 3

    def test_duplicated_household_tests_leave_median(self):
        records = [
            make_record(f"10.0.0.{i}", day=d, speed=speed + d)
            for i, speed in enumerate([10.0, 25.0, 40.0, 55.0, 70.0], start=1)
            for d in range(3)
        ]
        heavy = [r for r in records if r.client_ip == "10.0.0.1"]
        before = monthly_median_series(aggregate_monthly(records), "ISP-A")
        after = monthly_median_series(aggregate_monthly(records + heavy * 99), "ISP-A")
        assert before[0].median_mbps == pytest.approx(41.0)
        assert after == before

    def test_unknown_isp_is_empty(self):
        agg = aggregate_monthly([make_record()])
        assert monthly_median_series(agg, "Nobody") == []

    def test_country_filter(self):
        agg = aggregate_monthly([make_record(country="US"), make_record("10.0.0.9", country="AU")])
        assert monthly_median_series(agg, "ISP-A", "AU")[0].households == 1


class TestCountCcdf:

    @pytest.fixture
    def agg(self):
        records = []
        for ip, n in (("10.0.0.1", 1), ("10.0.0.2", 2), ("10.0.0.3", 3)):
            records += [make_record(ip, day=d * 31) for d in range(n)]
        return aggregate_monthly(records)

    def test_year_window(self, agg):
        points = test_count_ccdf(agg, "year")
        assert [(p.threshold, p.fraction) for p in points] == [
            (0, 1.0), (1, pytest.approx(2 / 3)), (2, pytest.approx(1 / 3)), (3, 0.0),
        ]

    def test_month_window(self, agg):
        # every household-month holds exactly one test
        points = test_count_ccdf(agg, "month")
        assert [(p.threshold, p.fraction) for p in points] == [(0, 1.0), (1, 0.0)]

    def test_fraction_non_increasing(self, agg):
        fractions = [p.fraction for p in test_count_ccdf(agg)]
        assert all(a >= b for a, b in zip(fractions, fractions[1:]))

    def test_year_filter(self, agg):
        assert test_count_ccdf(agg, year=2015) == []

    def test_bad_window(self, agg):
        with pytest.raises(ValueError):
            test_count_ccdf(agg, "week")


class TestTierDistribution:

    def test_shares(self):
        profiles = [
            profile("1", "A", "30-50"), profile("2", "A", "30-50"), profile("3", "A", "8-12"),
            profile("4", "A", "8-12", eligible=False), profile("5", "B", "75-100"),
        ]
        shares = tier_distribution(profiles, "A")
        assert [b for b, _ in shares] == ["8-12", "30-50"]
        assert [s for _, s in shares] == [pytest.approx(1 / 3), pytest.approx(2 / 3)]

    def test_no_eligible(self):
        assert tier_distribution([profile("1", "A", None)], "A") == []


# =============================================================================
# Run with: pytest tests/test_household.py -v
# =============================================================================

if __name__ == "__main__":
    pytest.main([__file__, "-v"])
