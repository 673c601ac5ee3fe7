"""
Household Isolation and Speed-Tier Estimation

An IP whose download speed rises with its congestion count is most likely
shared by several households (NAT), so its tests cannot be trusted to describe
one access link. Single-household IPs are kept, outliers are rejected with the
modified Thompson Tau rule, and the maximum surviving speed is the household's
speed-tier.
"""

import logging
import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .config import DEFAULT_TIER_EDGES, TierSettings
from .ingest import TestRecord

logger = logging.getLogger(__name__)


# Ineligibility reasons, in gate order
BELOW_THRESHOLD = "below test-count threshold"
NO_OFF_PEAK = "no off-peak test"
RHO_UNDEFINED = "rho undefined"
POSITIVE_RHO = "positive rho (shared IP)"


def _format_edge(value: float) -> str:
    return f"{value:g}"


@dataclass(frozen=True)
class TierBins:
    """Contiguous (low, high] speed bins starting at 0."""
    edges: tuple[float, ...] = tuple(DEFAULT_TIER_EDGES)

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 2 or edges[0] != 0:
            raise ValueError("tier bins need at least two edges starting at 0")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("tier bin edges must be strictly increasing")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def default(cls) -> "TierBins":
        return cls()

    @classmethod
    def from_spec(cls, spec: str | Sequence[float]) -> "TierBins":
        """Accepts "default", a comma-separated edge list, or a sequence of edges."""
        if isinstance(spec, str):
            if spec.strip().lower() == "default":
                return cls()
            return cls(tuple(float(part) for part in spec.split(",")))
        return cls(tuple(spec))

    @property
    def bins(self) -> list[tuple[float, float]]:
        return list(zip(self.edges, self.edges[1:]))

    def label(self, bin: tuple[float, float]) -> str:
        low, high = bin
        return f"{_format_edge(low)}-{_format_edge(high)}"

    def labels(self) -> list[str]:
        return [self.label(b) for b in self.bins]

    def parse(self, label: str) -> tuple[float, float]:
        """Resolve a label like "30-50" to its bin; it must be one of the configured bins."""
        try:
            low, high = (float(part) for part in label.strip().split("-"))
        except ValueError:
            raise ValueError(f"bad tier bin label {label!r}, expected 'low-high'")
        if (low, high) not in self.bins:
            raise ValueError(f"tier bin {label!r} is not one of {self.labels()}")
        return (low, high)

    def lookup(self, mbps: float) -> str | None:
        """Label of the bin containing `mbps`, or None above the last edge."""
        if mbps <= 0 or mbps > self.edges[-1]:
            return None
        index = int(np.searchsorted(self.edges, mbps, side="left"))
        return self.label((self.edges[index - 1], self.edges[index]))


# =============================================================================
# Correlation
# =============================================================================

def pearson_rho(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """
    Pearson correlation between speeds and congestion counts.

    Returns None when there are fewer than two points or either sample has
    zero variance.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} speeds vs {y.size} counts")
    if x.size < 2:
        return None
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return None
    rho = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, rho))


def classify_household(rho: float | None) -> bool:
    """True when the IP looks like a single household (rho defined and <= 0)."""
    return rho is not None and rho <= 0.0


def monthly_rho(tests: Sequence[TestRecord]) -> list[tuple[str, float | None]]:
    """Per-month rho for one IP, ordered by month."""
    months: dict[str, list[TestRecord]] = {}
    for test in tests:
        months.setdefault(test.year_month, []).append(test)
    return [
        (month, pearson_rho([t.download_mbps for t in group], [t.congestion_count for t in group]))
        for month, group in sorted(months.items())
    ]


# =============================================================================
# Outlier rejection
# =============================================================================

def thompson_tau(n: int, alpha: float = 0.05) -> float:
    """
    Modified Thompson Tau for a sample of size n:
    tau = t * (n - 1) / (sqrt(n) * sqrt(n - 2 + t^2)), t the two-sided critical
    value of Student's t with n - 2 degrees of freedom.
    """
    if n < 3:
        raise ValueError(f"tau needs at least 3 points, got {n}")
    t = stats.t.ppf(1.0 - alpha / 2.0, n - 2)
    return float(t * (n - 1) / (math.sqrt(n) * math.sqrt(n - 2 + t * t)))


@dataclass
class TauResult:
    retained: list[float]
    rejected: list[float]
    rounds: int

    def to_dict(self) -> dict:
        return asdict(self)


def reject_outliers_tau(speeds: Sequence[float], alpha: float = 0.05) -> TauResult:
    """
    Iterative modified Thompson Tau outlier rejection.

    Each round removes the single point farthest from the mean if its deviation
    exceeds tau * SD (sample SD). Stops when nothing is rejected or fewer than
    three points remain.

    Args:
        speeds: Observations (order is preserved in `retained`)
        alpha: Two-sided significance level

    Returns:
        TauResult with retained points, rejected points in rejection order, and
        the number of rejecting rounds
    """
    retained = [float(s) for s in speeds]
    rejected: list[float] = []
    while len(retained) >= 3:
        values = np.asarray(retained)
        sd = float(values.std(ddof=1))
        if sd == 0.0:
            break
        deviations = np.abs(values - values.mean())
        worst = int(np.argmax(deviations))
        if deviations[worst] <= thompson_tau(len(values), alpha) * sd:
            break
        rejected.append(retained.pop(worst))
    return TauResult(retained=retained, rejected=rejected, rounds=len(rejected))


# =============================================================================
# Profiles
# =============================================================================

@dataclass
class HouseholdProfile:
    """Per-IP summary over the analysis window."""
    client_ip: str
    isp: str
    country: str
    year: int | None
    annual_test_count: int
    off_peak_test_count: int
    max_speed_mbps: float
    rho: float | None
    single_household: bool
    eligible: bool
    reason: str | None = None
    tier_mbps: float | None = None
    tier_bin: str | None = None
    rejected_outliers: int = 0

    def to_row(self) -> dict:
        return {
            "ip": self.client_ip,
            "isp": self.isp,
            "country": self.country,
            "year": "" if self.year is None else self.year,
            "tests": self.annual_test_count,
            "rho": "" if self.rho is None else self.rho,
            "single_household": self.single_household,
            "eligible": self.eligible,
            "reason": self.reason or "",
            "tier_mbps": "" if self.tier_mbps is None else self.tier_mbps,
            "tier_bin": self.tier_bin or "",
        }

    def to_dict(self) -> dict:
        return asdict(self)


PROFILE_COLUMNS = ["ip", "isp", "country", "year", "tests", "rho", "single_household",
                   "eligible", "reason", "tier_mbps", "tier_bin"]


@dataclass
class TierEstimate:
    eligible: bool
    reason: str | None = None
    tier_mbps: float | None = None
    tier_bin: str | None = None
    tau: TauResult | None = None


def estimate_speed_tier(
    tests: Sequence[TestRecord],
    settings: TierSettings | None = None,
    rho: float | None = None,
    bins: TierBins | None = None,
) -> TierEstimate:
    """
    Speed-tier for one IP.

    Gates, in order: annual test count >= the country threshold, at least one
    off-peak test, and (refined mode) a single-household rho. The tier is the
    maximum speed surviving Tau rejection (refined) or the raw maximum.

    Args:
        tests: All tests of one IP in the window
        settings: Thresholds, bins and refinement switch
        rho: Precomputed rho; computed from the tests when omitted
        bins: Overrides settings.bins

    Returns:
        TierEstimate; ineligible estimates name the first gate that failed
    """
    settings = settings or TierSettings()
    bins = bins or TierBins(tuple(settings.bins))
    if not tests:
        return TierEstimate(eligible=False, reason=BELOW_THRESHOLD)
    ips = {t.client_ip for t in tests}
    if len(ips) != 1:
        raise ValueError(f"tests span {len(ips)} IPs")

    if len(tests) < settings.threshold_for(tests[0].country):
        return TierEstimate(eligible=False, reason=BELOW_THRESHOLD)
    if not any(not t.peak for t in tests):
        return TierEstimate(eligible=False, reason=NO_OFF_PEAK)

    speeds = [t.download_mbps for t in tests]
    if not settings.refine:
        tier = max(speeds)
        return TierEstimate(eligible=True, tier_mbps=tier, tier_bin=bins.lookup(tier))

    if rho is None:
        rho = pearson_rho(speeds, [t.congestion_count for t in tests])
    if rho is None:
        return TierEstimate(eligible=False, reason=RHO_UNDEFINED)
    if not classify_household(rho):
        return TierEstimate(eligible=False, reason=POSITIVE_RHO)

    tau = reject_outliers_tau(speeds, settings.tau_alpha)
    tier = max(tau.retained)
    return TierEstimate(eligible=True, tier_mbps=tier, tier_bin=bins.lookup(tier), tau=tau)


def profile_household(
    tests: Sequence[TestRecord],
    settings: TierSettings | None = None,
    year: int | None = None,
) -> HouseholdProfile:
    settings = settings or TierSettings()
    first = tests[0]
    speeds = [t.download_mbps for t in tests]
    rho = pearson_rho(speeds, [t.congestion_count for t in tests])
    estimate = estimate_speed_tier(tests, settings, rho=rho)
    return HouseholdProfile(
        client_ip=first.client_ip,
        isp=first.isp,
        country=first.country,
        year=year,
        annual_test_count=len(tests),
        off_peak_test_count=sum(1 for t in tests if not t.peak),
        max_speed_mbps=max(speeds),
        rho=rho,
        single_household=classify_household(rho),
        eligible=estimate.eligible,
        reason=estimate.reason,
        tier_mbps=estimate.tier_mbps,
        tier_bin=estimate.tier_bin,
        rejected_outliers=len(estimate.tau.rejected) if estimate.tau else 0,
    )


def group_by_ip(records: Sequence[TestRecord], year: int | None = None) -> dict[str, list[TestRecord]]:
    groups: dict[str, list[TestRecord]] = {}
    for record in records:
        if year is not None and record.year != year:
            continue
        groups.setdefault(record.client_ip, []).append(record)
    return groups


def build_profiles(
    records: Sequence[TestRecord],
    settings: TierSettings | None = None,
    year: int | None = None,
) -> list[HouseholdProfile]:
    """
    Profile every IP in the records.

    Args:
        records: Validated records
        settings: Tier settings
        year: Restrict the analysis window to one local calendar year

    Returns:
        Profiles ordered by IP
    """
    settings = settings or TierSettings()
    groups = group_by_ip(records, year)
    profiles = [profile_household(groups[ip], settings, year) for ip in sorted(groups)]
    eligible = sum(1 for p in profiles if p.eligible)
    logger.info("profiled %d IPs (%d eligible)%s", len(profiles), eligible,
                f" for {year}" if year is not None else "")
    return profiles


def write_profiles(profiles: Sequence[HouseholdProfile], path) -> None:
    pd.DataFrame([p.to_row() for p in profiles], columns=PROFILE_COLUMNS).to_csv(path, index=False)


def read_profiles(path) -> list[HouseholdProfile]:
    """Read a profiles CSV written by `write_profiles`."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)

    def _optional_float(value: str) -> float | None:
        return None if value == "" else float(value)

    return [
        HouseholdProfile(
            client_ip=row["ip"],
            isp=row["isp"],
            country=row["country"],
            year=None if row["year"] == "" else int(row["year"]),
            annual_test_count=int(row["tests"]),
            off_peak_test_count=0,
            max_speed_mbps=0.0,
            rho=_optional_float(row["rho"]),
            single_household=row["single_household"] == "True",
            eligible=row["eligible"] == "True",
            reason=row["reason"] or None,
            tier_mbps=_optional_float(row["tier_mbps"]),
            tier_bin=row["tier_bin"] or None,
        )
        for row in frame.to_dict(orient="records")
    ]


# =============================================================================
# Distributions
# =============================================================================

@dataclass
class RhoHistogram:
    isp: str
    edges: list[float]
    density: list[float]
    count: int
    mean_rho: float

    def to_dict(self) -> dict:
        return asdict(self)


def rho_distribution(
    profiles: Sequence[HouseholdProfile],
    bin_width: float = 0.1,
    isp: str | None = None,
) -> dict[str, RhoHistogram]:
    """
    Normalized density of defined rho values over [-1, 1], per ISP.

    ISPs without any defined rho are left out.
    """
    nbins = int(round(2.0 / bin_width))
    values: dict[str, list[float]] = {}
    for profile in profiles:
        if profile.rho is None or (isp is not None and profile.isp != isp):
            continue
        values.setdefault(profile.isp, []).append(profile.rho)

    histograms = {}
    for name in sorted(values):
        rhos = np.asarray(values[name])
        density, edges = np.histogram(rhos, bins=nbins, range=(-1.0, 1.0), density=True)
        histograms[name] = RhoHistogram(
            isp=name,
            edges=[float(e) for e in edges],
            density=[float(d) for d in density],
            count=int(rhos.size),
            mean_rho=float(rhos.mean()),
        )
    return histograms


def household_scatter(tests: Sequence[TestRecord], normalize: bool = False) -> pd.DataFrame:
    """Speed against congestion count for one IP, optionally scaled by each column's max."""
    frame = pd.DataFrame({
        "download_mbps": [t.download_mbps for t in tests],
        "congestion_count": [t.congestion_count for t in tests],
    })
    if normalize and not frame.empty:
        frame["download_norm"] = frame["download_mbps"] / frame["download_mbps"].max()
        top = frame["congestion_count"].max()
        frame["congestion_norm"] = frame["congestion_count"] / top if top > 0 else 0.0
    return frame
