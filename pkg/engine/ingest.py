"""
Record Ingestion

Parses raw speed-test exports (CSV or JSON lines) into validated, ISP-attributed,
time-localized TestRecords. Bad rows are never fatal: each one becomes a Reject
entry carrying its 1-based row number and a reason.
"""

import ipaddress
import json
import logging
import math
import re
from dataclasses import dataclass, asdict, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import pandas as pd

logger = logging.getLogger(__name__)


RAW_COLUMNS = [
    "ip",
    "timestamp_utc",
    "region",
    "isp_hint",
    "download_mbps",
    "min_rtt_ms",
    "mss_bytes",
    "rwnd_bytes",
    "os",
    "congestion_count",
    "client_limited_frac",
]

OPTIONAL_RAW_COLUMNS = {"isp_hint", "os"}

RECORD_COLUMNS = [
    "ip",
    "timestamp_utc",
    "utc_offset_minutes",
    "local_hour",
    "isp",
    "country",
    "download_mbps",
    "min_rtt_ms",
    "mss_bytes",
    "rwnd_bytes",
    "os_class",
    "congestion_count",
    "client_limited_frac",
]

PEAK_START_HOUR = 19
PEAK_END_HOUR = 23

_MALFORMED = "\x00malformed"


class OsClass(str, Enum):
    """Host TCP behaviour derived from the OS string."""
    MODERN_AUTOTUNING = "ModernAutotuning"
    LEGACY_NO_AUTOTUNING = "LegacyNoAutotuning"
    OTHER = "Other"


# Mode tie-break precedence: earlier wins.
OS_CLASS_PRECEDENCE = [
    OsClass.MODERN_AUTOTUNING,
    OsClass.LEGACY_NO_AUTOTUNING,
    OsClass.OTHER,
]


# =============================================================================
# OS CLASSIFICATION TABLE
# =============================================================================
# Pattern (case-insensitive, first match wins)              Class
# -----------------------------------------------------------------------------
# Linux >= 3.4                                              ModernAutotuning
# Windows XP / 2000 / NT 5.x / 9x / ME                      LegacyNoAutotuning
# Windows Vista / 7 / 8 / 10 / 11 / NT >= 6 / Server 2008+  ModernAutotuning
# macOS / Mac OS X / OS X / Darwin                          ModernAutotuning
# anything else                                             Other
# =============================================================================

DEFAULT_OS_RULES: list[tuple[str, OsClass]] = [
    (r"linux\D*(3\.([4-9]|\d{2,})|[4-9]\.\d+|\d{2,}\.\d+)", OsClass.MODERN_AUTOTUNING),
    (r"windows\s*(xp|2000|nt\s*5(\.\d+)?|9[58]|me)\b", OsClass.LEGACY_NO_AUTOTUNING),
    (r"windows\s*(vista|7|8(\.1)?|10|11|nt\s*([6-9]|1\d)(\.\d+)?|server\s*20(0[89]|1\d|2\d))\b",
     OsClass.MODERN_AUTOTUNING),
    (r"mac\s*os|os\s*x|macos|darwin", OsClass.MODERN_AUTOTUNING),
]


@dataclass(frozen=True)
class OsRule:
    pattern: re.Pattern
    os_class: OsClass


def compile_os_rules(rules: Iterable[tuple[str, OsClass | str]]) -> list[OsRule]:
    return [OsRule(re.compile(p, re.IGNORECASE), OsClass(c)) for p, c in rules]


_DEFAULT_RULES = compile_os_rules(DEFAULT_OS_RULES)


def classify_os(os_string: str | None, rules: Sequence[OsRule] | None = None) -> OsClass:
    """
    Map a raw OS string to its TCP auto-tuning class.

    Total function: unknown or empty strings map to Other.
    """
    if not os_string:
        return OsClass.OTHER
    for rule in rules if rules is not None else _DEFAULT_RULES:
        if rule.pattern.search(os_string):
            return rule.os_class
    return OsClass.OTHER


def load_os_rules(path: str | Path) -> list[OsRule]:
    """
    Load an override table (CSV `pattern,os_class`). Override rules are tried
    before the default table.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    overrides = compile_os_rules(zip(frame["pattern"], frame["os_class"]))
    return overrides + _DEFAULT_RULES


def is_peak(local_hour: int) -> bool:
    """Peak hours are the half-open local interval [19:00, 23:00)."""
    if not 0 <= local_hour <= 23:
        raise ValueError(f"local_hour must be in 0..23, got {local_hour}")
    return PEAK_START_HOUR <= local_hour < PEAK_END_HOUR


# =============================================================================
# Records
# =============================================================================

@dataclass(frozen=True)
class TestRecord:
    """One normalized speed-test observation."""
    __test__ = False

    client_ip: str
    timestamp_utc: float
    utc_offset_minutes: int
    local_hour: int
    isp: str
    country: str
    download_mbps: float
    min_rtt_ms: float
    mss_bytes: float
    rwnd_bytes: float
    os_class: OsClass
    congestion_count: int
    client_limited_frac: float

    @property
    def local_datetime(self) -> datetime:
        utc = datetime.fromtimestamp(self.timestamp_utc, tz=timezone.utc)
        return (utc + timedelta(minutes=self.utc_offset_minutes)).replace(tzinfo=None)

    @property
    def year(self) -> int:
        return self.local_datetime.year

    @property
    def year_month(self) -> str:
        return self.local_datetime.strftime("%Y-%m")

    @property
    def day_of_month(self) -> int:
        return self.local_datetime.day

    @property
    def peak(self) -> bool:
        return is_peak(self.local_hour)

    def to_row(self) -> dict[str, Any]:
        row = asdict(self)
        row["ip"] = row.pop("client_ip")
        row["os_class"] = self.os_class.value
        return {col: row[col] for col in RECORD_COLUMNS}


def local_hour_for(timestamp_utc: float, utc_offset_minutes: int) -> int:
    """UTC hour shifted by the region offset, mod 24."""
    return int(math.floor((timestamp_utc + utc_offset_minutes * 60) / 3600)) % 24


@dataclass(frozen=True)
class PrefixEntry:
    network: ipaddress.IPv4Network | ipaddress.IPv6Network
    isp: str
    country: str


class IspPrefixMap:
    """
    Static prefix -> (ISP, country) map. Overlapping prefixes resolve to the
    longest match.
    """

    def __init__(self, entries: Iterable[tuple[str, str, str]] = ()):
        self.entries: list[PrefixEntry] = []
        self._index: dict[tuple[int, int], dict[int, PrefixEntry]] = {}
        self._lengths: dict[int, list[int]] = {4: [], 6: []}
        for cidr, isp, country in entries:
            self.add(cidr, isp, country)

    def add(self, cidr: str, isp: str, country: str) -> None:
        network = ipaddress.ip_network(cidr.strip(), strict=False)
        entry = PrefixEntry(network, isp.strip(), country.strip().upper())
        self.entries.append(entry)
        key = (network.version, network.prefixlen)
        if key not in self._index:
            self._index[key] = {}
            self._lengths[network.version] = sorted(
                self._lengths[network.version] + [network.prefixlen], reverse=True
            )
        self._index[key][int(network.network_address)] = entry

    def resolve(self, ip: str | ipaddress.IPv4Address | ipaddress.IPv6Address) -> PrefixEntry | None:
        address = ip if not isinstance(ip, str) else ipaddress.ip_address(ip.strip())
        bits = 32 if address.version == 4 else 128
        value = int(address)
        for length in self._lengths[address.version]:
            mask = ((1 << length) - 1) << (bits - length) if length else 0
            entry = self._index[(address.version, length)].get(value & mask)
            if entry is not None:
                return entry
        return None

    def __len__(self) -> int:
        return len(self.entries)


def load_prefix_map(path: str | Path) -> IspPrefixMap:
    """Load a `cidr,isp,country` CSV."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    return IspPrefixMap(zip(frame["cidr"], frame["isp"], frame["country"]))


def load_tz_table(path: str | Path) -> dict[str, int]:
    """Load a `region,utc_offset_minutes` CSV (flat offsets, no DST)."""
    frame = pd.read_csv(path, dtype={"region": str, "utc_offset_minutes": int}, keep_default_na=False)
    return dict(zip(frame["region"].str.strip(), frame["utc_offset_minutes"].astype(int)))


# =============================================================================
# Rejects
# =============================================================================

@dataclass
class Reject:
    row: int
    reason: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RejectLog:
    entries: list[Reject] = field(default_factory=list)

    def add(self, row: int, reason: str) -> None:
        self.entries.append(Reject(row, reason))

    def __len__(self) -> int:
        return len(self.entries)

    def reasons(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for entry in self.entries:
            counts[entry.reason] = counts.get(entry.reason, 0) + 1
        return dict(sorted(counts.items()))

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        pd.DataFrame([e.to_dict() for e in self.entries], columns=["row", "reason"]).to_csv(path, index=False)
        return path


@dataclass
class ParseResult:
    records: list[TestRecord]
    rejects: RejectLog
    total_rows: int

    def to_dict(self) -> dict:
        return {
            "total_rows": self.total_rows,
            "accepted": len(self.records),
            "rejected": len(self.rejects),
            "reasons": self.rejects.reasons(),
        }


class _RowError(Exception):
    pass


def _missing(value: Any) -> bool:
    if value is None:
        return True
    if isinstance(value, float) and math.isnan(value):
        return True
    return isinstance(value, str) and value.strip() == ""


def _number(row: dict, name: str) -> float:
    value = row.get(name)
    if _missing(value):
        raise _RowError(f"sparse record: missing {name}")
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise _RowError("malformed row")
    if not math.isfinite(number):
        raise _RowError("malformed row")
    return number


def _build_record(
    row: dict,
    prefix_map: IspPrefixMap,
    tz_table: dict[str, int],
    os_rules: Sequence[OsRule] | None,
) -> TestRecord:
    if any(value == _MALFORMED for value in row.values()):
        raise _RowError("malformed row")
    for name in RAW_COLUMNS:
        if name not in OPTIONAL_RAW_COLUMNS and _missing(row.get(name)):
            raise _RowError(f"sparse record: missing {name}")

    ip_text = str(row["ip"]).strip()
    try:
        address = ipaddress.ip_address(ip_text)
    except ValueError:
        raise _RowError("malformed row")

    timestamp = _number(row, "timestamp_utc")
    download = _number(row, "download_mbps")
    min_rtt = _number(row, "min_rtt_ms")
    mss = _number(row, "mss_bytes")
    rwnd = _number(row, "rwnd_bytes")
    congestion = _number(row, "congestion_count")
    client_limited = _number(row, "client_limited_frac")

    if download <= 0:
        raise _RowError("non-positive speed")
    if min_rtt < 0:
        raise _RowError("negative min_rtt")
    if mss <= 0:
        raise _RowError("non-positive mss")
    if rwnd <= 0:
        raise _RowError("non-positive rwnd")
    if congestion < 0:
        raise _RowError("negative congestion count")
    if congestion != int(congestion):
        raise _RowError("malformed row")
    if not 0.0 <= client_limited <= 1.0:
        raise _RowError("client_limited_frac out of range")

    region = str(row["region"]).strip()
    if region not in tz_table:
        raise _RowError("unknown region")
    entry = prefix_map.resolve(address)
    if entry is None:
        raise _RowError("no ISP match")

    offset = int(tz_table[region])
    os_value = row.get("os")
    return TestRecord(
        client_ip=str(address),
        timestamp_utc=timestamp,
        utc_offset_minutes=offset,
        local_hour=local_hour_for(timestamp, offset),
        isp=entry.isp,
        country=entry.country,
        download_mbps=download,
        min_rtt_ms=min_rtt,
        mss_bytes=mss,
        rwnd_bytes=rwnd,
        os_class=classify_os(None if _missing(os_value) else str(os_value), os_rules),
        congestion_count=int(congestion),
        client_limited_frac=client_limited,
    )


def _read_raw_rows(path: Path) -> list[dict]:
    if path.suffix.lower() in {".jsonl", ".ndjson", ".json"}:
        rows = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            try:
                value = json.loads(line)
            except json.JSONDecodeError:
                value = None
            rows.append(value if isinstance(value, dict) else {"ip": _MALFORMED})
        return rows

    header = pd.read_csv(path, nrows=0).columns
    width = len(header)

    # Over-long lines keep their position as a row of sentinels.
    def _bad_line(fields: list[str]) -> list[str]:
        return [_MALFORMED] * width

    frame = pd.read_csv(
        path,
        dtype=str,
        keep_default_na=False,
        engine="python",
        on_bad_lines=_bad_line,
        skip_blank_lines=True,
    )
    # Short lines come back NaN-padded; present but empty fields stay "".
    frame.loc[frame.isna().any(axis=1), :] = _MALFORMED
    return frame.to_dict(orient="records")


def parse_records(
    path: str | Path,
    prefix_map: IspPrefixMap,
    tz_table: dict[str, int],
    os_rules: Sequence[OsRule] | None = None,
) -> ParseResult:
    """
    Parse a raw export into TestRecords.

    Args:
        path: CSV (documented header) or JSON-lines file
        prefix_map: Static prefix -> ISP map; it wins over `isp_hint`
        tz_table: Region -> UTC offset (minutes)
        os_rules: Optional OS classification table

    Returns:
        ParseResult with accepted records in input order and a RejectLog;
        accepted + rejected always equals the number of input rows
    """
    path = Path(path)
    rows = _read_raw_rows(path)
    records: list[TestRecord] = []
    rejects = RejectLog()
    for number, row in enumerate(rows, start=1):
        try:
            records.append(_build_record(row, prefix_map, tz_table, os_rules))
        except _RowError as e:
            rejects.add(number, str(e))

    logger.info("parsed %s: %d accepted, %d rejected", path.name, len(records), len(rejects))
    return ParseResult(records=records, rejects=rejects, total_rows=len(rows))


# =============================================================================
# Normalized record files
# =============================================================================

def records_frame(records: Sequence[TestRecord]) -> pd.DataFrame:
    """Columnar view of records with derived time columns."""
    frame = pd.DataFrame([r.to_row() for r in records], columns=RECORD_COLUMNS)
    if frame.empty:
        for name in ("year", "year_month", "day_of_month", "peak"):
            frame[name] = pd.Series(dtype=object)
        return frame
    local = pd.to_datetime(frame["timestamp_utc"] + frame["utc_offset_minutes"] * 60, unit="s")
    frame["year"] = local.dt.year
    frame["year_month"] = local.dt.strftime("%Y-%m")
    frame["day_of_month"] = local.dt.day
    frame["peak"] = (frame["local_hour"] >= PEAK_START_HOUR) & (frame["local_hour"] < PEAK_END_HOUR)
    return frame


def write_records(records: Sequence[TestRecord], path: str | Path) -> Path:
    """Write records in the normalized CSV format (round-trip exact)."""
    path = Path(path)
    pd.DataFrame([r.to_row() for r in records], columns=RECORD_COLUMNS).to_csv(path, index=False)
    return path


def read_records(path: str | Path) -> list[TestRecord]:
    """Read a normalized record CSV written by `write_records`."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in RECORD_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path}: not a record file, missing columns {missing}")
    return [
        TestRecord(
            client_ip=row["ip"],
            timestamp_utc=float(row["timestamp_utc"]),
            utc_offset_minutes=int(row["utc_offset_minutes"]),
            local_hour=int(row["local_hour"]),
            isp=row["isp"],
            country=row["country"],
            download_mbps=float(row["download_mbps"]),
            min_rtt_ms=float(row["min_rtt_ms"]),
            mss_bytes=float(row["mss_bytes"]),
            rwnd_bytes=float(row["rwnd_bytes"]),
            os_class=OsClass(row["os_class"]),
            congestion_count=int(row["congestion_count"]),
            client_limited_frac=float(row["client_limited_frac"]),
        )
        for row in frame.to_dict(orient="records")
    ]
