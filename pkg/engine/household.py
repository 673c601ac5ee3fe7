"""
Household Aggregation

Collapses tests into one value per household per month so that every household
gets a single vote, and produces the naive baselines: monthly median speed per
ISP and the test-count CCDF.
"""

import logging
from dataclasses import dataclass, asdict
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .ingest import OS_CLASS_PRECEDENCE, OsClass, TestRecord, records_frame

logger = logging.getLogger(__name__)

STATISTICS = ("mean", "median")


@dataclass(frozen=True)
class HouseholdMonth:
    client_ip: str
    isp: str
    country: str
    year_month: str
    test_count: int
    mean_speed_mbps: float
    off_peak_test_count: int
    mean_min_rtt_ms: float
    mean_rwnd_bytes: float
    mean_mss_bytes: float
    modal_os_class: OsClass

    def to_dict(self) -> dict:
        row = asdict(self)
        row["modal_os_class"] = self.modal_os_class.value
        return row


@dataclass(frozen=True)
class MedianPoint:
    year_month: str
    median_mbps: float
    households: int


@dataclass(frozen=True)
class CcdfPoint:
    threshold: int
    fraction: float


def modal_os_class(classes: Iterable[OsClass | str]) -> OsClass:
    """Most frequent class; ties go to the earlier entry of OS_CLASS_PRECEDENCE."""
    counts: dict[OsClass, int] = {}
    for value in classes:
        value = OsClass(value)
        counts[value] = counts.get(value, 0) + 1
    if not counts:
        return OsClass.OTHER
    best = max(counts.values())
    return next(c for c in OS_CLASS_PRECEDENCE if counts.get(c) == best)


def aggregate_monthly(records: Sequence[TestRecord], statistic: str = "mean") -> list[HouseholdMonth]:
    """
    One HouseholdMonth per (ip, local year-month) with at least one test.

    Args:
        records: Validated records
        statistic: "mean" (default) or "median" of the month's download speeds

    Returns:
        Entries ordered by (ip, year_month)
    """
    if statistic not in STATISTICS:
        raise ValueError(f"statistic must be one of {STATISTICS}, got {statistic!r}")
    if not records:
        return []

    frame = records_frame(records)
    frame["off_peak"] = ~frame["peak"].astype(bool)
    grouped = frame.groupby(["ip", "year_month"], sort=True)

    speeds = grouped["download_mbps"].agg(statistic)
    summary = grouped.agg(
        isp=("isp", "first"),
        country=("country", "first"),
        test_count=("download_mbps", "size"),
        off_peak_test_count=("off_peak", "sum"),
        mean_min_rtt_ms=("min_rtt_ms", "mean"),
        mean_rwnd_bytes=("rwnd_bytes", "mean"),
        mean_mss_bytes=("mss_bytes", "mean"),
    )
    modal = grouped["os_class"].agg(modal_os_class)

    months = [
        HouseholdMonth(
            client_ip=ip,
            isp=row.isp,
            country=row.country,
            year_month=year_month,
            test_count=int(row.test_count),
            mean_speed_mbps=float(speeds.loc[(ip, year_month)]),
            off_peak_test_count=int(row.off_peak_test_count),
            mean_min_rtt_ms=float(row.mean_min_rtt_ms),
            mean_rwnd_bytes=float(row.mean_rwnd_bytes),
            mean_mss_bytes=float(row.mean_mss_bytes),
            modal_os_class=modal.loc[(ip, year_month)],
        )
        for (ip, year_month), row in summary.iterrows()
    ]
    logger.debug("aggregated %d records into %d household-months", len(records), len(months))
    return months


def months_frame(agg: Sequence[HouseholdMonth]) -> pd.DataFrame:
    return pd.DataFrame([m.to_dict() for m in agg], columns=list(HouseholdMonth.__dataclass_fields__))


def monthly_median_series(
    agg: Sequence[HouseholdMonth],
    isp: str,
    country: str | None = None,
) -> list[MedianPoint]:
    """
    Month-by-month median of household values for one ISP.

    The median is taken across households, never across tests. An ISP with no
    households yields an empty series.
    """
    frame = months_frame(agg)
    frame = frame[frame["isp"] == isp]
    if country is not None:
        frame = frame[frame["country"] == country]
    if frame.empty:
        return []
    grouped = frame.groupby("year_month", sort=True)["mean_speed_mbps"]
    medians = grouped.median()
    sizes = grouped.size()
    return [
        MedianPoint(year_month=ym, median_mbps=float(medians[ym]), households=int(sizes[ym]))
        for ym in medians.index
    ]


def test_count_ccdf(
    agg: Sequence[HouseholdMonth],
    window: str = "year",
    year: int | None = None,
) -> list[CcdfPoint]:
    """
    CCDF of per-household test counts.

    Args:
        agg: Household-months
        window: "year" counts tests per (ip, year); "month" per (ip, year_month)
        year: Restrict to one calendar year

    Returns:
        (threshold, fraction of households with count > threshold) for every
        integer threshold from 0 to the largest count
    """
    if window not in ("year", "month"):
        raise ValueError(f"window must be 'year' or 'month', got {window!r}")
    frame = months_frame(agg)
    if frame.empty:
        return []
    frame["year"] = frame["year_month"].str.slice(0, 4).astype(int)
    if year is not None:
        frame = frame[frame["year"] == year]
        if frame.empty:
            return []
    key = ["client_ip", "year"] if window == "year" else ["client_ip", "year_month"]
    counts = np.sort(frame.groupby(key)["test_count"].sum().to_numpy())
    total = len(counts)
    thresholds = np.arange(0, int(counts[-1]) + 1)
    exceeding = total - np.searchsorted(counts, thresholds, side="right")
    return [CcdfPoint(int(t), float(e) / total) for t, e in zip(thresholds, exceeding)]


# Excluded from pytest collection when imported into test modules.
test_count_ccdf.__test__ = False


def tier_distribution(profiles: Sequence, isp: str) -> list[tuple[str, float]]:
    """
    Share of an ISP's eligible households in each speed-tier bin.

    Args:
        profiles: HouseholdProfiles (anything with isp, eligible, tier_bin)
        isp: ISP to summarize

    Returns:
        (bin label, share) pairs ordered by lower edge
    """
    labels = [p.tier_bin for p in profiles if p.isp == isp and p.eligible and p.tier_bin]
    if not labels:
        return []
    counts = pd.Series(labels).value_counts()
    order = sorted(counts.index, key=lambda label: float(label.split("-")[0]))
    total = float(counts.sum())
    return [(label, float(counts[label]) / total) for label in order]
