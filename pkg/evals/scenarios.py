"""
Synthetic scenarios shared by the evals.

Each builder returns a SynthSpec; the helpers turn generated records into
profiles and matching samples the same way the pipeline does.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from engine.config import TierSettings
from engine.ingest import OsClass
from engine.matching import build_samples
from engine.synth import CongestionSpec, CountSpec, IspSpec, NormalSpec, SynthSpec
from engine.tiers import build_profiles

MODERN = OsClass.MODERN_AUTOTUNING.value
LEGACY = OsClass.LEGACY_NO_AUTOTUNING.value


def os_skewed_pair(seed: int, effect: float, households: int = 400, tests: int = 24) -> SynthSpec:
    """
    Two ISPs on the same tier with opposite OS mixes. Legacy stacks run at a
    fraction of the modern efficiency, so ISP-A's naive lead is mostly OS.
    """
    return SynthSpec(
        seed=seed,
        year=2016,
        tests=CountSpec(distribution="fixed", mean=tests),
        congestion=CongestionSpec(slack_lambda=60.0, volume_lambda=2.0),
        isp=[
            IspSpec(name="ISP-A", households=households, tier_mix={"30-50": 1.0},
                    os_mix={MODERN: 0.8, LEGACY: 0.2}, effect_mbps=effect),
            IspSpec(name="ISP-B", households=households, tier_mix={"30-50": 1.0},
                    os_mix={MODERN: 0.2, LEGACY: 0.8}),
        ],
    )


def rwnd_skewed_pair(seed: int, treated: int = 150, controls: int = 50, tests: int = 12) -> SynthSpec:
    """
    ISP-A clients announce small receive windows, ISP-B clients large ones, and
    ISP-B has fewer households: controls are scarce where the groups overlap.
    """
    return SynthSpec(
        seed=seed,
        year=2016,
        tests=CountSpec(distribution="fixed", mean=tests),
        isp=[
            IspSpec(name="ISP-A", households=treated, tier_mix={"30-50": 1.0},
                    rwnd_bytes=NormalSpec(mean=250_000, sd=80_000, min=16_384)),
            IspSpec(name="ISP-B", households=controls, tier_mix={"30-50": 1.0},
                    rwnd_bytes=NormalSpec(mean=450_000, sd=150_000, min=16_384)),
        ],
    )


def single_household(seed: int, months: int = 12, tests: int = 50, households: int = 200) -> SynthSpec:
    """One household behind every IP, mixed tiers."""
    return SynthSpec(
        seed=seed,
        months=months,
        tests=CountSpec(distribution="fixed", mean=tests),
        congestion=CongestionSpec(slack_lambda=60.0, volume_lambda=2.0),
        isp=[
            IspSpec(name="ISP-A", households=households,
                    tier_mix={"20-25": 0.3, "30-50": 0.4, "75-100": 0.3}),
        ],
    )


def nat_shared(seed: int, group_size: int = 4, tests: int = 30, groups: int = 50) -> SynthSpec:
    """
    Every IP hides `group_size` households drawn from a 25 and a 100 Mbps tier
    (ratio 4:1); faster households also see more network volume.
    """
    return SynthSpec(
        seed=seed,
        tests=CountSpec(distribution="fixed", mean=tests),
        congestion=CongestionSpec(slack_lambda=20.0, volume_lambda=4.0, volume_ref=25.0),
        isp=[
            IspSpec(name="ISP-A", households=groups * group_size,
                    tier_mix={"20-25": 0.5, "75-100": 0.5},
                    nat_group_size={str(group_size): 1.0}),
        ],
    )


def importance_mix(seed: int, households: int = 60, tests: int = 15) -> SynthSpec:
    """Speed driven by tier, then receive window, then RTT; a 1 Mbps ISP gap."""
    shared = dict(
        tier_mix={"8-12": 0.25, "20-25": 0.25, "30-50": 0.25, "75-100": 0.25},
        rwnd_bytes=NormalSpec(mean=200_000, sd=100_000, min=16_384),
        min_rtt_ms=NormalSpec(mean=30, sd=12, min=2),
    )
    return SynthSpec(
        seed=seed,
        rtt_penalty=0.25,
        rtt_jitter_ms=3.0,
        tests=CountSpec(distribution="fixed", mean=tests),
        isp=[
            IspSpec(name="ISP-A", households=households, effect_mbps=1.0, **shared),
            IspSpec(name="ISP-B", households=households, **shared),
        ],
    )


def tier_settings(min_tests: int, refine: bool = True) -> TierSettings:
    return TierSettings(min_tests={}, default_min_tests=min_tests, refine=refine)


def profiles_for(records, settings: TierSettings):
    years = sorted({r.year for r in records})
    return [p for year in years for p in build_profiles(records, settings, year)]


def samples_for(records, settings: TierSettings, unit: str = "household"):
    return build_samples(records, profiles_for(records, settings), unit)


def nat_vs_single(seed: int, groups: int = 80, tests: int = 30) -> SynthSpec:
    """ISP-A hides four mixed-tier households behind each IP; ISP-B has one per IP. No true effect."""
    tiers = {"20-25": 0.5, "75-100": 0.5}
    return SynthSpec(
        seed=seed,
        tests=CountSpec(distribution="fixed", mean=tests),
        congestion=CongestionSpec(slack_lambda=20.0, volume_lambda=4.0, volume_ref=25.0),
        isp=[
            IspSpec(name="ISP-A", households=groups * 4, tier_mix=tiers, nat_group_size={"4": 1.0}),
            IspSpec(name="ISP-B", households=groups * 2, tier_mix=tiers),
        ],
    )
