"""Engine module: speed-test ingestion, household isolation, importance ranking and ISP matching."""

__version__ = "0.1.0"

from .ingest import TestRecord, IspPrefixMap, OsClass, parse_records, classify_os, is_peak
from .household import HouseholdMonth, aggregate_monthly, monthly_median_series, test_count_ccdf
from .tiers import (
    HouseholdProfile,
    TierBins,
    pearson_rho,
    classify_household,
    reject_outliers_tau,
    estimate_speed_tier,
    rho_distribution,
)
from .importance import FeatureMatrix, ImportanceReport, fit_forest, permutation_importance
from .matching import MatchConfig, MatchOutcome, match_samples, estimate_ate, balance_report, rank_pairs
from .synth import SynthSpec, GroundTruth, generate
from .report import PlotSeries, emit, run_pipeline

__all__ = [
    "TestRecord",
    "IspPrefixMap",
    "OsClass",
    "parse_records",
    "classify_os",
    "is_peak",
    "HouseholdMonth",
    "aggregate_monthly",
    "monthly_median_series",
    "test_count_ccdf",
    "HouseholdProfile",
    "TierBins",
    "pearson_rho",
    "classify_household",
    "reject_outliers_tau",
    "estimate_speed_tier",
    "rho_distribution",
    "FeatureMatrix",
    "ImportanceReport",
    "fit_forest",
    "permutation_importance",
    "MatchConfig",
    "MatchOutcome",
    "match_samples",
    "estimate_ate",
    "balance_report",
    "rank_pairs",
    "SynthSpec",
    "GroundTruth",
    "generate",
    "PlotSeries",
    "emit",
    "run_pipeline",
]
