"""
Report and Pipeline

Plot-ready series for every figure the analysis produces (no rendering), the
per-ISP test accounting, and `run_pipeline`, which runs every stage in
order and writes an artifact directory with a manifest.
"""

import json
import logging
import platform
from dataclasses import dataclass, asdict, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .config import PipelineConfig
from .household import CcdfPoint, MedianPoint, aggregate_monthly, monthly_median_series, test_count_ccdf, tier_distribution
from .importance import ImportanceReport, build_feature_matrix, fit_forest, permutation_importance
from .ingest import TestRecord, load_os_rules, load_prefix_map, load_tz_table, parse_records, read_records, write_records
from .matching import MatchConfig, PairComparison, RankRow, build_samples, ranked_frame, run_comparisons, select_groups, sort_rows
from .tiers import BELOW_THRESHOLD, HouseholdProfile, RhoHistogram, build_profiles, group_by_ip, household_scatter, rho_distribution, write_profiles

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class StageError(RuntimeError):
    """A pipeline stage failed; `stage` names it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


# =============================================================================
# PLOT SERIES KINDS
# =============================================================================
# kind               columns                                         metadata
# -----------------------------------------------------------------------------
# monthly_median     year_month, median_mbps, households, isp        isp
# ccdf               threshold, fraction                             window
# density            covariate, group, bin_low, bin_high, density    pair_id
# scatter_facet      day, local_hour, download_mbps, ip              isp, year_month
# rho_hist           rho_low, rho_high, density                      isp
# pair_forest        pair_id, naive, ate_r, ci_lo, ci_hi, ate_nr,    -
#                    ci_lo_nr, ci_hi_nr, discard_r, discard_nr
# household_scatter  download_mbps, congestion_count[, *_norm]       ip
# tier_distribution  tier_bin, share                                 isp
# importance         feature, score, rank, share                     country
# =============================================================================

REQUIRED_METADATA: dict[str, tuple[str, ...]] = {
    "monthly_median": ("isp",),
    "ccdf": ("window",),
    "density": ("pair_id",),
    "scatter_facet": ("isp", "year_month"),
    "rho_hist": ("isp",),
    "pair_forest": (),
    "household_scatter": ("ip",),
    "tier_distribution": ("isp",),
    "importance": ("country",),
}

FORMATS = ("csv", "json")


@dataclass
class PlotSeries:
    kind: str
    columns: dict[str, list]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in REQUIRED_METADATA:
            raise ValueError(f"unknown series kind {self.kind!r}")
        lengths = {name: len(values) for name, values in self.columns.items()}
        if len(set(lengths.values())) > 1:
            raise ValueError(f"{self.kind}: column lengths differ {lengths}")
        missing = [key for key in REQUIRED_METADATA[self.kind] if key not in self.metadata]
        if missing:
            raise ValueError(f"{self.kind}: missing metadata {missing}")

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()), []))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.columns, columns=list(self.columns))

    def groups(self, column: str) -> list:
        """Distinct values of a column in first-appearance order."""
        return list(dict.fromkeys(self.columns[column]))


def emit(series: PlotSeries, path: str | Path, format: str = "csv") -> Path:
    """
    Write a series as CSV (header row names the columns) or JSON.

    Raises:
        ValueError: unknown kind or format
    """
    if series.kind not in REQUIRED_METADATA:
        raise ValueError(f"unknown series kind {series.kind!r}")
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {format!r}")
    path = Path(path)
    if format == "csv":
        series.frame().to_csv(path, index=False)
    else:
        payload = {
            "kind": series.kind,
            "metadata": series.metadata,
            "columns": list(series.columns),
            "rows": series.frame().to_dict(orient="records"),
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


# -------------------- Builders --------------------

def monthly_median_plot(points: Sequence[MedianPoint], isp: str, country: str | None = None) -> PlotSeries:
    return PlotSeries(
        kind="monthly_median",
        columns={
            "year_month": [p.year_month for p in points],
            "median_mbps": [p.median_mbps for p in points],
            "households": [p.households for p in points],
            "isp": [isp] * len(points),
        },
        metadata={"isp": isp, "country": country},
    )


def ccdf_plot(points: Sequence[CcdfPoint], window: str, year: int | None = None) -> PlotSeries:
    return PlotSeries(
        kind="ccdf",
        columns={"threshold": [p.threshold for p in points], "fraction": [p.fraction for p in points]},
        metadata={"window": window, "year": year},
    )


def rho_hist_plot(histogram: RhoHistogram) -> PlotSeries:
    return PlotSeries(
        kind="rho_hist",
        columns={
            "rho_low": histogram.edges[:-1],
            "rho_high": histogram.edges[1:],
            "density": histogram.density,
        },
        metadata={"isp": histogram.isp, "count": histogram.count, "mean_rho": histogram.mean_rho},
    )


def scatter_facet_plot(records: Sequence[TestRecord], isp: str, year_month: str) -> PlotSeries:
    """Every test of one ISP-month, grouped by local day of month."""
    tests = sorted(
        (r for r in records if r.isp == isp and r.year_month == year_month),
        key=lambda r: (r.day_of_month, r.timestamp_utc, r.client_ip),
    )
    return PlotSeries(
        kind="scatter_facet",
        columns={
            "day": [t.day_of_month for t in tests],
            "local_hour": [t.local_hour for t in tests],
            "download_mbps": [t.download_mbps for t in tests],
            "ip": [t.client_ip for t in tests],
        },
        metadata={"isp": isp, "year_month": year_month},
    )


def household_scatter_plot(tests: Sequence[TestRecord], ip: str, normalize: bool = True) -> PlotSeries:
    frame = household_scatter(tests, normalize=normalize)
    return PlotSeries(
        kind="household_scatter",
        columns={name: frame[name].tolist() for name in frame.columns},
        metadata={"ip": ip, "tests": len(tests)},
    )


def tier_distribution_plot(profiles: Sequence[HouseholdProfile], isp: str) -> PlotSeries:
    shares = tier_distribution(profiles, isp)
    return PlotSeries(
        kind="tier_distribution",
        columns={"tier_bin": [b for b, _ in shares], "share": [s for _, s in shares]},
        metadata={"isp": isp},
    )


def importance_plot(report: ImportanceReport, country: str | None) -> PlotSeries:
    ranked = report.ranked()
    return PlotSeries(
        kind="importance",
        columns={
            "feature": [e.feature for e in ranked],
            "score": [e.score for e in ranked],
            "rank": [e.rank for e in ranked],
            "share": [e.share for e in ranked],
        },
        metadata={"country": country or "all", **report.metadata},
    )


def pair_forest_plot(rows: Sequence[RankRow]) -> PlotSeries:
    """One row per ISP pair, in ranked order."""
    table = [r.to_row() for r in rows]
    return PlotSeries(
        kind="pair_forest",
        columns={
            "pair_id": [t["pair_id"] for t in table],
            "naive": [t["naive"] for t in table],
            "ate_r": [t["ate_r"] for t in table],
            "ci_lo": [t["ci_lo_r"] for t in table],
            "ci_hi": [t["ci_hi_r"] for t in table],
            "ate_nr": [t["ate_nr"] for t in table],
            "ci_lo_nr": [t["ci_lo_nr"] for t in table],
            "ci_hi_nr": [t["ci_hi_nr"] for t in table],
            "discard_r": [t["discard_r"] for t in table],
            "discard_nr": [t["discard_nr"] for t in table],
            "status": [t["status"] for t in table],
        },
    )


def density_plot(comparison: PairComparison, samples: pd.DataFrame, bins: int = 20) -> PlotSeries:
    """Covariate densities per ISP before and after matching (with replacement)."""
    cfg = comparison.config
    treated, controls = select_groups(samples, cfg)
    pairs = comparison.with_replacement.pairs
    t_index = treated.set_index("sample_id")
    c_index = controls.set_index("sample_id")
    columns: dict[str, list] = {"covariate": [], "group": [], "bin_low": [], "bin_high": [], "density": []}
    for name in cfg.continuous_covariates:
        groups = {
            f"{cfg.treatment_isp}/before": treated[name].to_numpy(dtype=float),
            f"{cfg.control_isp}/before": controls[name].to_numpy(dtype=float),
        }
        if pairs:
            groups[f"{cfg.treatment_isp}/after"] = t_index.loc[[p.treated_id for p in pairs], name].to_numpy(dtype=float)
            groups[f"{cfg.control_isp}/after"] = c_index.loc[[p.control_id for p in pairs], name].to_numpy(dtype=float)
        present = [v for v in groups.values() if v.size]
        if not present:
            continue
        values = np.concatenate(present)
        low, high = float(values.min()), float(values.max())
        if low == high:
            high = low + 1.0
        edges = np.linspace(low, high, bins + 1)
        for group, data in groups.items():
            if data.size == 0:
                continue
            density, _ = np.histogram(data, bins=edges, density=True)
            columns["covariate"] += [name] * bins
            columns["group"] += [group] * bins
            columns["bin_low"] += edges[:-1].tolist()
            columns["bin_high"] += edges[1:].tolist()
            columns["density"] += density.tolist()
    return PlotSeries(kind="density", columns=columns, metadata={"pair_id": cfg.label, "tier_bin": cfg.tier_bin})


# =============================================================================
# Accounting
# =============================================================================

@dataclass
class AccountingRow:
    year: int | None
    isp: str
    country: str
    raw_tests: int
    thresholded_tests: int
    eligible_tests: int
    households: int
    thresholded_households: int
    eligible_households: int

    @property
    def retained_fraction(self) -> float:
        return self.thresholded_tests / self.raw_tests if self.raw_tests else 0.0

    def to_dict(self) -> dict:
        row = asdict(self)
        row["retained_fraction"] = self.retained_fraction
        return row


def accounting_table(profiles: Sequence[HouseholdProfile]) -> list[AccountingRow]:
    """
    Per (year, ISP): raw tests, tests of households over the test-count
    threshold, and tests of eligible households.
    """
    rows: dict[tuple, AccountingRow] = {}
    for p in profiles:
        key = (p.year if p.year is not None else -1, p.isp)
        row = rows.setdefault(key, AccountingRow(p.year, p.isp, p.country, 0, 0, 0, 0, 0, 0))
        row.raw_tests += p.annual_test_count
        row.households += 1
        if p.reason != BELOW_THRESHOLD:
            row.thresholded_tests += p.annual_test_count
            row.thresholded_households += 1
        if p.eligible:
            row.eligible_tests += p.annual_test_count
            row.eligible_households += 1
    return [rows[k] for k in sorted(rows)]


# =============================================================================
# Pipeline
# =============================================================================

@dataclass
class PipelineResult:
    out_dir: Path
    manifest: dict[str, Any]
    comparisons: list[PairComparison] = field(default_factory=list)
    profiles: list[HouseholdProfile] = field(default_factory=list)


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text).strip("_").lower() or "x"


class _Run:
    """Mutable state shared by the stages of one pipeline run."""

    def __init__(self, config: PipelineConfig, out_dir: Path):
        self.config = config
        self.out_dir = out_dir
        self.files: list[str] = []
        self.series: dict[str, str] = {}
        self.counts: dict[str, Any] = {}
        self.records: list[TestRecord] = []
        self.profiles: list[HouseholdProfile] = []
        self.comparisons: list[PairComparison] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out_dir / name

    def write_series(self, name: str, series: PlotSeries) -> None:
        fmt = self.config.report.format
        filename = f"series/{name}.{fmt}"
        emit(series, self.path(filename), fmt)
        self.series[name] = filename

    def stage(self, name: str, fn: Callable[[], None]) -> None:
        logger.info("stage %s", name)
        try:
            fn()
        except StageError:
            raise
        except Exception as e:
            raise StageError(name, e) from e

    # -------------------- Stages --------------------

    def ingest(self) -> None:
        source = self.config.input
        if source.records is not None:
            self.records = read_records(source.records)
            self.counts["raw_rows"] = len(self.records)
            self.counts["rejected_rows"] = 0
        else:
            rules = load_os_rules(source.os_rules) if source.os_rules else None
            parsed = parse_records(source.raw, load_prefix_map(source.prefix_map), load_tz_table(source.tz), rules)
            self.records = parsed.records
            self.counts["raw_rows"] = parsed.total_rows
            self.counts["rejected_rows"] = len(parsed.rejects)
            self.counts["reject_reasons"] = parsed.rejects.reasons()
            parsed.rejects.write(self.path("rejects.csv"))
        self.counts["records"] = len(self.records)
        write_records(self.records, self.path("records.csv"))

    def household(self) -> None:
        months = aggregate_monthly(self.records)
        pd.DataFrame([m.to_dict() for m in months]).to_csv(self.path("household_months.csv"), index=False)
        self.counts["household_months"] = len(months)
        countries = self.config.report.countries or sorted({m.country for m in months})
        for isp, country in sorted({(m.isp, m.country) for m in months if m.country in countries}):
            points = monthly_median_series(months, isp, country)
            self.write_series(f"monthly_median_{_slug(country)}_{_slug(isp)}", monthly_median_plot(points, isp, country))
        for year in self.years():
            self.write_series(f"ccdf_{year}", ccdf_plot(test_count_ccdf(months, "year", year), "year", year))
        month = self.config.report.scatter_month
        if month:
            for isp in sorted({r.isp for r in self.records}):
                self.write_series(f"scatter_facet_{_slug(isp)}_{_slug(month)}",
                                  scatter_facet_plot(self.records, isp, month))

    def years(self) -> list[int]:
        return self.config.years or sorted({r.year for r in self.records})

    def tiers(self) -> None:
        settings = self.config.tiers
        for year in self.years():
            self.profiles.extend(build_profiles(self.records, settings, year))
        write_profiles(self.profiles, self.path("profiles.csv"))

        accounting = accounting_table(self.profiles)
        pd.DataFrame([row.to_dict() for row in accounting]).to_csv(self.path("accounting.csv"), index=False)
        self.counts["accounting"] = [row.to_dict() for row in accounting]
        self.counts["thresholded_tests"] = sum(r.thresholded_tests for r in accounting)
        self.counts["eligible_tests"] = sum(r.eligible_tests for r in accounting)
        self.counts["single_household_ips"] = sum(1 for p in self.profiles if p.single_household)
        self.counts["eligible_households"] = sum(1 for p in self.profiles if p.eligible)

        for isp, histogram in rho_distribution(self.profiles, settings.rho_bin_width).items():
            self.write_series(f"rho_hist_{_slug(isp)}", rho_hist_plot(histogram))
        for isp in sorted({p.isp for p in self.profiles}):
            self.write_series(f"tier_distribution_{_slug(isp)}", tier_distribution_plot(self.profiles, isp))

        ip = self.config.report.scatter_ip
        if ip:
            tests = group_by_ip(self.records).get(ip, [])
            self.write_series(f"household_scatter_{_slug(ip)}", household_scatter_plot(tests, ip))

    def importance(self) -> None:
        settings = self.config.importance
        if not settings.enabled:
            return
        seed = settings.seed if settings.seed is not None else self.config.seed
        countries = [settings.country] if settings.country else sorted({r.country for r in self.records})
        for country in countries:
            matrix = build_feature_matrix(self.records, self.profiles, country)
            if matrix.n_rows < 2:
                logger.warning("importance skipped for %s: %d usable rows", country, matrix.n_rows)
                continue
            forest = fit_forest(matrix, settings.trees, settings.max_depth, settings.min_leaf,
                                settings.features_per_split, seed)
            report = permutation_importance(forest, matrix, settings.repeats, seed)
            report.to_frame().to_csv(self.path(f"importance_{_slug(country)}.csv"), index=False)
            self.write_series(f"importance_{_slug(country)}", importance_plot(report, country))

    def matching(self) -> None:
        settings = self.config.match
        if not self.config.pairs:
            self.counts["matched_samples"] = 0
            return
        samples = build_samples(self.records, self.profiles, settings.unit)
        configs = [MatchConfig.from_settings(pair, settings, self.config.seed) for pair in self.config.pairs]
        self.comparisons = run_comparisons(configs, samples, settings.workers)

        rows = sort_rows([c.to_row() for c in self.comparisons])
        ranked_frame(rows).to_csv(self.path("ranked.csv"), index=False)
        outcomes = [c.to_dict() for c in self.comparisons]
        self.path("outcomes.json").write_text(json.dumps(outcomes, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.write_series("pair_forest", pair_forest_plot(rows))
        for comparison in self.comparisons:
            self.write_series(f"density_{_slug(comparison.config.label)}", density_plot(comparison, samples))

        matched: set[int] = set()
        for comparison in self.comparisons:
            for outcome in (comparison.with_replacement, comparison.without_replacement):
                for pair in outcome.pairs:
                    matched.update((pair.treated_id, pair.control_id))
        self.counts["samples"] = len(samples)
        self.counts["matched_samples"] = len(matched)

    def manifest(self) -> dict[str, Any]:
        funnel = {
            "raw_rows": self.counts.get("raw_rows", 0),
            "records": self.counts.get("records", 0),
            "thresholded_tests": self.counts.get("thresholded_tests", 0),
            "eligible_tests": self.counts.get("eligible_tests", 0),
            "matched_samples": self.counts.get("matched_samples", 0),
        }
        return {
            "created_at": datetime.now().isoformat(timespec="seconds"),
            "versions": {
                "ispmatch": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "pandas": pd.__version__,
                "scipy": scipy.__version__,
            },
            "seeds": {
                "pipeline": self.config.seed,
                "importance": self.config.importance.seed,
                "match": self.config.match.seed,
            },
            "config": self.config.model_dump(mode="json"),
            "funnel": funnel,
            "counts": self.counts,
            "series": self.series,
            "files": sorted(self.files),
        }


def run_pipeline(config: PipelineConfig, out_dir: str | Path) -> PipelineResult:
    """
    Run ingest, household, tiers, importance and matching in order, writing
    every artifact under `out_dir` plus a manifest.json with stable key order.

    Raises:
        StageError: naming the first stage that failed
    """
    out_dir = Path(out_dir)
    (out_dir / "series").mkdir(parents=True, exist_ok=True)
    run = _Run(config, out_dir)
    run.stage("ingest", run.ingest)
    run.stage("household", run.household)
    run.stage("tiers", run.tiers)
    run.stage("importance", run.importance)
    run.stage("matching", run.matching)

    manifest = run.manifest()
    run.stage("report", lambda: (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8"))
    logger.info("pipeline finished: %s", manifest["funnel"])
    return PipelineResult(out_dir, manifest, run.comparisons, run.profiles)
