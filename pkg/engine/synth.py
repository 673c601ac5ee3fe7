"""
Synthetic Speed-Test Generator

Generates speed-test records with a known ground truth: per-household speed
tiers, per-ISP additive effects, NAT sharing and outliers. The speed and
congestion models are modelling choices made so that the analysis stages have
something with a known answer to recover:

    efficiency = os_efficiency[os] * rwnd / (rwnd + window_half_bytes) * mss / 1460
    speed      = min(tier, tier * efficiency - rtt_penalty * min_rtt + isp_effect
                       + N(0, noise_sd_abs) + tier * N(0, noise_sd_rel))
                 floored at 0.05 Mbps; outliers multiply the speed
    congestion ~ Poisson(slack_lambda * max(0, 1 - speed / tier)
                         + volume_lambda * tier / volume_ref)

Every household draws from its own generator seeded with
(seed, isp index, household index), so households can be generated in any
order with identical output.
"""

import calendar
import ipaddress
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from grammar.config_grammar import ConfigSyntaxError, load_config

from .config import DEFAULT_TIER_EDGES, ConfigError, env_seed, validate
from .ingest import OsClass, TestRecord, local_hour_for

logger = logging.getLogger(__name__)

MIN_SPEED_MBPS = 0.05

# Synthetic IPs: one /16 per ISP counted up from 10.0.0.0, below multicast
IP_BASE = int(ipaddress.IPv4Address("10.0.0.0"))
IP_LIMIT = int(ipaddress.IPv4Address("224.0.0.0"))

PEAK_HOURS = np.arange(19, 23)
OFF_PEAK_HOURS = np.array([h for h in range(24) if not 19 <= h < 23])


class InfeasibleSpecError(ValueError):
    """Raised when a synthetic spec cannot produce any data."""


def _check_mix(mix: dict[str, float], what: str) -> dict[str, float]:
    if not mix:
        raise ValueError(f"{what} is empty")
    if any(p < 0 for p in mix.values()):
        raise ValueError(f"{what} has negative probabilities")
    if not math.isclose(sum(mix.values()), 1.0, abs_tol=1e-9):
        raise ValueError(f"{what} probabilities sum to {sum(mix.values())}, not 1")
    return mix


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NormalSpec(_Spec):
    """Normal distribution clipped below at `min`."""
    mean: float
    sd: float = Field(default=0.0, ge=0)
    min: float = 0.0

    def draw(self, rng: np.random.Generator, size=None):
        value = rng.normal(self.mean, self.sd, size) if self.sd > 0 else np.full(size or (), self.mean)
        return np.maximum(value, self.min)


class IspSpec(_Spec):
    name: str
    country: str = "US"
    households: int = Field(ge=1)
    tier_mix: dict[str, float] = Field(default_factory=lambda: {"30-50": 1.0})
    rwnd_bytes: NormalSpec = Field(default_factory=lambda: NormalSpec(mean=524288, sd=131072, min=16384))
    min_rtt_ms: NormalSpec = Field(default_factory=lambda: NormalSpec(mean=30, sd=10, min=1))
    mss_mix: dict[str, float] = Field(default_factory=lambda: {"1460": 1.0})
    os_mix: dict[str, float] = Field(default_factory=lambda: {OsClass.MODERN_AUTOTUNING.value: 1.0})
    nat_group_size: dict[str, float] = Field(default_factory=lambda: {"1": 1.0})
    effect_mbps: float = 0.0

    @field_validator("tier_mix", "mss_mix", "os_mix", "nat_group_size")
    @classmethod
    def _mix(cls, mix: dict[str, float], info) -> dict[str, float]:
        return _check_mix(mix, info.field_name)

    @field_validator("os_mix")
    @classmethod
    def _os_names(cls, mix: dict[str, float]) -> dict[str, float]:
        for name in mix:
            OsClass(name)
        return mix

    @field_validator("mss_mix", "nat_group_size")
    @classmethod
    def _positive_keys(cls, mix: dict[str, float]) -> dict[str, float]:
        if any(int(k) < 1 for k in mix):
            raise ValueError("keys must be positive integers")
        return mix

    @field_validator("effect_mbps")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("effect must be finite")
        return value


class CountSpec(_Spec):
    """Tests per household: fixed, 1 + Poisson(mean - 1), or discrete Pareto."""
    distribution: Literal["fixed", "poisson", "pareto"] = "fixed"
    mean: float = Field(default=30, ge=1)
    pareto_alpha: float = Field(default=1.1, gt=0)
    minimum: int = Field(default=1, ge=1)
    maximum: int = Field(default=5000, ge=1)

    def draw(self, rng: np.random.Generator) -> int:
        if self.distribution == "fixed":
            count = int(round(self.mean))
        elif self.distribution == "poisson":
            count = 1 + int(rng.poisson(self.mean - 1))
        else:
            count = int(math.floor(self.minimum * (1.0 - rng.random()) ** (-1.0 / self.pareto_alpha)))
        return int(min(max(count, self.minimum), self.maximum))


class CongestionSpec(_Spec):
    slack_lambda: float = Field(default=20.0, ge=0)
    volume_lambda: float = Field(default=2.0, ge=0)
    volume_ref: float = Field(default=50.0, gt=0)


class SynthSpec(_Spec):
    seed: int = Field(default_factory=env_seed)
    year: int = 2016
    months: int = Field(default=12, ge=1, le=12)
    utc_offset_minutes: int = 0
    tier_values: Literal["edge", "uniform"] = "edge"
    tier_bins: list[float] = Field(default_factory=lambda: list(DEFAULT_TIER_EDGES))
    noise_sd_abs: float = Field(default=1.0, ge=0)
    noise_sd_rel: float = Field(default=0.03, ge=0)
    rtt_penalty: float = Field(default=0.0, ge=0)
    rtt_jitter_ms: float = Field(default=1.0, ge=0)
    window_half_bytes: float = Field(default=65536, gt=0)
    os_efficiency: dict[str, float] = Field(default_factory=lambda: {
        OsClass.MODERN_AUTOTUNING.value: 0.95,
        OsClass.LEGACY_NO_AUTOTUNING.value: 0.6,
        OsClass.OTHER.value: 0.8,
    })
    peak_fraction: float = Field(default=0.3, ge=0, le=1)
    client_limited_max: float = Field(default=0.05, ge=0, le=1)
    outlier_rate: float = Field(default=0.0, ge=0, le=1)
    outlier_multiplier: float = Field(default=2.0, gt=0)
    tests: CountSpec = Field(default_factory=CountSpec)
    congestion: CongestionSpec = Field(default_factory=CongestionSpec)
    isp: list[IspSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "SynthSpec":
        labels = {f"{a:g}-{b:g}" for a, b in zip(self.tier_bins, self.tier_bins[1:])}
        for isp in self.isp:
            unknown = set(isp.tier_mix) - labels
            if unknown:
                raise ValueError(f"{isp.name}: tier_mix uses unknown bins {sorted(unknown)}")
        names = [isp.name for isp in self.isp]
        if len(set(names)) != len(names):
            raise ValueError("ISP names must be unique")
        return self

    @property
    def isps(self) -> list[IspSpec]:
        return self.isp


def load_synth_spec(path: str | Path) -> SynthSpec:
    """Read a synthetic dataset spec written in the config grammar."""
    try:
        data = load_config(path)
    except (OSError, ConfigSyntaxError) as e:
        raise ConfigError(f"{path}: {e}") from e
    return validate(SynthSpec, data, str(path))


# =============================================================================
# Ground truth
# =============================================================================

@dataclass
class HouseholdTruth:
    isp: str
    household: int
    ip: str
    nat_group: int
    nat_size: int
    tier_mbps: float
    tier_bin: str
    os_class: str
    rwnd_bytes: float
    min_rtt_ms: float
    mss_bytes: float
    tests: int


@dataclass
class GroundTruth:
    seed: int
    effects: dict[str, float]
    households: list[HouseholdTruth] = field(default_factory=list)

    def by_ip(self) -> dict[str, list[HouseholdTruth]]:
        groups: dict[str, list[HouseholdTruth]] = {}
        for household in self.households:
            groups.setdefault(household.ip, []).append(household)
        return groups

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "effects": dict(sorted(self.effects.items())),
            "households": [asdict(h) for h in self.households],
        }


def write_truth(truth: GroundTruth, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class SynthResult:
    records: list[TestRecord]
    truth: GroundTruth


# =============================================================================
# Generation
# =============================================================================

def _choose(rng: np.random.Generator, mix: dict[str, float]) -> str:
    keys = list(mix)
    return keys[int(rng.choice(len(keys), p=np.asarray(list(mix.values()), dtype=float)))]


def _nat_groups(spec: SynthSpec, isp: IspSpec, isp_index: int) -> list[int]:
    """Group id for every household of an ISP."""
    rng = np.random.default_rng([spec.seed, isp_index])
    groups = []
    group = 0
    while len(groups) < isp.households:
        size = int(_choose(rng, isp.nat_group_size))
        groups.extend([group] * min(size, isp.households - len(groups)))
        group += 1
    return groups


def _group_ip(isp_index: int, group: int) -> str:
    if group >= 1 << 16:
        raise InfeasibleSpecError("at most 65536 IPs per ISP")
    address = IP_BASE + (isp_index << 16) + group
    if address >= IP_LIMIT:
        raise InfeasibleSpecError(f"no synthetic address block for ISP #{isp_index}")
    return str(ipaddress.IPv4Address(address))


def _tier_value(rng: np.random.Generator, spec: SynthSpec, label: str) -> float:
    low, high = (float(x) for x in label.split("-"))
    if spec.tier_values == "edge":
        return high
    return float(high - (high - low) * rng.random())


def _timestamps(rng: np.random.Generator, spec: SynthSpec, n: int) -> np.ndarray:
    """UTC epoch seconds for n tests spread over the spec's months."""
    starts = np.array([calendar.timegm((spec.year, m, 1, 0, 0, 0)) for m in range(1, spec.months + 1)])
    lengths = np.array([calendar.monthrange(spec.year, m)[1] for m in range(1, spec.months + 1)])
    months = rng.integers(0, spec.months, size=n)
    days = rng.integers(0, lengths[months])
    peak = rng.random(n) < spec.peak_fraction
    hours = np.where(peak, rng.choice(PEAK_HOURS, size=n), rng.choice(OFF_PEAK_HOURS, size=n))
    seconds = rng.integers(0, 3600, size=n)
    local = starts[months] + days * 86400 + hours * 3600 + seconds
    return (local - spec.utc_offset_minutes * 60).astype(float)


def _household(
    spec: SynthSpec,
    isp: IspSpec,
    isp_index: int,
    index: int,
    group: int,
    nat_size: int,
) -> tuple[HouseholdTruth, list[TestRecord]]:
    rng = np.random.default_rng([spec.seed, isp_index, index])
    tier_bin = _choose(rng, isp.tier_mix)
    tier = _tier_value(rng, spec, tier_bin)
    os_class = _choose(rng, isp.os_mix)
    rwnd = float(isp.rwnd_bytes.draw(rng))
    rtt = float(isp.min_rtt_ms.draw(rng))
    mss = float(_choose(rng, isp.mss_mix))
    n = spec.tests.draw(rng)
    ip = _group_ip(isp_index, group)

    efficiency = spec.os_efficiency[os_class] * rwnd / (rwnd + spec.window_half_bytes) * mss / 1460.0
    rtts = rtt + (rng.exponential(spec.rtt_jitter_ms, n) if spec.rtt_jitter_ms > 0 else np.zeros(n))
    noise = rng.normal(0.0, 1.0, n) * spec.noise_sd_abs + tier * rng.normal(0.0, 1.0, n) * spec.noise_sd_rel
    speeds = np.minimum(tier, tier * efficiency - spec.rtt_penalty * rtts + isp.effect_mbps + noise)
    speeds = np.maximum(speeds, MIN_SPEED_MBPS)
    outliers = rng.random(n) < spec.outlier_rate
    speeds = np.where(outliers, speeds * spec.outlier_multiplier, speeds)

    c = spec.congestion
    lam = c.slack_lambda * np.maximum(0.0, 1.0 - speeds / tier) + c.volume_lambda * tier / c.volume_ref
    congestion = rng.poisson(lam)
    client_limited = rng.random(n) * spec.client_limited_max
    stamps = _timestamps(rng, spec, n)

    records = [
        TestRecord(
            client_ip=ip,
            timestamp_utc=float(stamps[i]),
            utc_offset_minutes=spec.utc_offset_minutes,
            local_hour=local_hour_for(float(stamps[i]), spec.utc_offset_minutes),
            isp=isp.name,
            country=isp.country.upper(),
            download_mbps=float(speeds[i]),
            min_rtt_ms=float(rtts[i]),
            mss_bytes=mss,
            rwnd_bytes=rwnd,
            os_class=OsClass(os_class),
            congestion_count=int(congestion[i]),
            client_limited_frac=float(client_limited[i]),
        )
        for i in range(n)
    ]
    truth = HouseholdTruth(
        isp=isp.name,
        household=index,
        ip=ip,
        nat_group=group,
        nat_size=nat_size,
        tier_mbps=tier,
        tier_bin=tier_bin,
        os_class=os_class,
        rwnd_bytes=rwnd,
        min_rtt_ms=rtt,
        mss_bytes=mss,
        tests=n,
    )
    return truth, records


def generate(spec: SynthSpec) -> SynthResult:
    """
    Generate records and their ground truth.

    Records are ordered by ISP (spec order), then household, then test.

    Raises:
        InfeasibleSpecError: if the spec defines no ISP
    """
    if not spec.isps:
        raise InfeasibleSpecError("spec defines no ISP")

    records: list[TestRecord] = []
    truth = GroundTruth(seed=spec.seed, effects={isp.name: isp.effect_mbps for isp in spec.isps})
    for isp_index, isp in enumerate(spec.isps):
        groups = _nat_groups(spec, isp, isp_index)
        sizes = Counter(groups)
        for index, group in enumerate(groups):
            household, tests = _household(spec, isp, isp_index, index, group, sizes[group])
            truth.households.append(household)
            records.extend(tests)

    logger.info("generated %d records for %d households", len(records), len(truth.households))
    return SynthResult(records=records, truth=truth)
