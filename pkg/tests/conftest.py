"""Shared fixtures: record factories, side tables and a small finished pipeline run."""

import pytest

from engine.config import ImportanceSettings, InputSettings, MatchSettings, PairSpec, PipelineConfig, TierSettings
from engine.ingest import RAW_COLUMNS, OsClass, TestRecord, local_hour_for, write_records
from engine.report import run_pipeline
from engine.synth import CountSpec, IspSpec, SynthSpec, generate

# 2016-03-01T00:00:00Z
MARCH_2016 = 1456790400.0

MODERN = OsClass.MODERN_AUTOTUNING.value
LEGACY = OsClass.LEGACY_NO_AUTOTUNING.value

PREFIX_ROWS = [
    ("10.0.0.0/8", "BigNet", "us"),
    ("10.1.0.0/16", "Telstra", "AU"),
    ("2001:db8::/32", "V6Net", "GB"),
]

TZ_ROWS = [("US-East", -300), ("AU-NSW", 600), ("UTC", 0)]


def make_record(
    ip: str = "10.0.0.1",
    *,
    day: int = 0,
    hour: int = 10,
    speed: float = 40.0,
    congestion: int = 0,
    isp: str = "ISP-A",
    country: str = "US",
    os_class: OsClass = OsClass.MODERN_AUTOTUNING,
    rwnd: float = 524288.0,
    rtt: float = 30.0,
    mss: float = 1460.0,
    offset: int = 0,
) -> TestRecord:
    """A record taken `day` days after 2016-03-01 at local `hour`."""
    stamp = MARCH_2016 + day * 86400.0 + hour * 3600.0 - offset * 60.0
    return TestRecord(
        client_ip=ip,
        timestamp_utc=stamp,
        utc_offset_minutes=offset,
        local_hour=local_hour_for(stamp, offset),
        isp=isp,
        country=country,
        download_mbps=speed,
        min_rtt_ms=rtt,
        mss_bytes=mss,
        rwnd_bytes=rwnd,
        os_class=os_class,
        congestion_count=congestion,
        client_limited_frac=0.0,
    )


def raw_row(**overrides) -> dict:
    """One valid raw export row (US-East, BigNet prefix)."""
    row = {
        "ip": "10.2.3.4",
        "timestamp_utc": MARCH_2016 + 15 * 3600.0,
        "region": "US-East",
        "isp_hint": "",
        "download_mbps": 24.3,
        "min_rtt_ms": 18.5,
        "mss_bytes": 1460,
        "rwnd_bytes": 262144,
        "os": "Linux 3.13",
        "congestion_count": 3,
        "client_limited_frac": 0.02,
    }
    row.update(overrides)
    return row


def two_isp_spec(seed: int = 3, households: int = 30, tests: int = 24, effect: float = 2.0) -> SynthSpec:
    """Two ISPs on the 30-50 tier with the same mixed OS population."""
    return SynthSpec(
        seed=seed,
        tests=CountSpec(distribution="fixed", mean=tests),
        isp=[
            IspSpec(name="ISP-A", households=households, tier_mix={"30-50": 1.0},
                    os_mix={MODERN: 0.5, LEGACY: 0.5}, effect_mbps=effect),
            IspSpec(name="ISP-B", households=households, tier_mix={"30-50": 1.0},
                    os_mix={MODERN: 0.5, LEGACY: 0.5}),
        ],
    )


def pipeline_config(records_path, seed: int = 3, format: str = "csv", importance: bool = True) -> PipelineConfig:
    return PipelineConfig(
        seed=seed,
        input=InputSettings(records=records_path),
        tiers=TierSettings(min_tests={}, default_min_tests=20),
        importance=ImportanceSettings(enabled=importance, trees=5, max_depth=4, repeats=1),
        match=MatchSettings(bootstrap=100),
        pair=[
            PairSpec(treat="ISP-A", control="ISP-B", bin="30-50"),
            PairSpec(treat="ISP-A", control="ISP-Z", bin="30-50"),
        ],
        report={"format": format},
    )


# =============================================================================
# Fixtures
# =============================================================================

@pytest.fixture
def record_factory():
    return make_record


@pytest.fixture
def side_tables(tmp_path):
    """Prefix map and timezone table on disk."""
    prefix = tmp_path / "prefixes.csv"
    prefix.write_text("cidr,isp,country\n" + "".join(f"{c},{i},{k}\n" for c, i, k in PREFIX_ROWS))
    tz = tmp_path / "tz.csv"
    tz.write_text("region,utc_offset_minutes\n" + "".join(f"{r},{o}\n" for r, o in TZ_ROWS))
    return {"prefix_map": prefix, "tz": tz}


@pytest.fixture
def write_raw(tmp_path):
    """Write raw rows (dicts) as a CSV export with the documented header."""
    import pandas as pd

    def _write(rows: list[dict], name: str = "raw.csv"):
        path = tmp_path / name
        pd.DataFrame(rows, columns=RAW_COLUMNS).to_csv(path, index=False)
        return path

    return _write


@pytest.fixture(scope="session")
def synthetic_records():
    return generate(two_isp_spec()).records


@pytest.fixture(scope="session")
def records_file(tmp_path_factory, synthetic_records):
    return write_records(synthetic_records, tmp_path_factory.mktemp("data") / "records.csv")


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory, records_file):
    """One finished run with CSV series, shared by report and API tests."""
    return run_pipeline(pipeline_config(records_file), tmp_path_factory.mktemp("run") / "out")
