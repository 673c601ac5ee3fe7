"""
Mahalanobis Matching

Debiases ISP comparisons inside one speed-tier bin. Treated samples are visited
in a seeded random order; each one is paired with the closest admissible control
(Mahalanobis distance), where admissible means equal exact covariates and every
continuous covariate within `caliper_sd` standard deviations. Unmatched samples
fall outside the common support and are discarded.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field, replace
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .config import CONTINUOUS_COVARIATES, EXACT_COVARIATES, MatchSettings, PairSpec
from .household import modal_os_class
from .ingest import TestRecord

logger = logging.getLogger(__name__)

INSUFFICIENT_SUPPORT = "insufficient common support"
NO_SAMPLES = "no samples"
OK = "ok"

SAMPLE_COLUMNS = ["sample_id", "isp", "household", "year", "tier_bin", "download_mbps",
                  *CONTINUOUS_COVARIATES, *EXACT_COVARIATES]


@dataclass(frozen=True)
class MatchConfig:
    """Parameters for one treatment-vs-control comparison (treatment minus control)."""
    treatment_isp: str
    control_isp: str
    tier_bin: str | None = None
    year: int | None = None
    caliper_sd: float = 0.2
    with_replacement: bool = True
    continuous_covariates: tuple[str, ...] = ("tier_mbps", "rwnd_bytes", "min_rtt_ms", "mss_bytes")
    exact_covariates: tuple[str, ...] = ("os_class",)
    seed: int = 0
    bootstrap: int = 1000
    pair_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "continuous_covariates", tuple(self.continuous_covariates))
        object.__setattr__(self, "exact_covariates", tuple(self.exact_covariates))
        if not self.caliper_sd > 0:
            raise ValueError(f"caliper_sd must be > 0, got {self.caliper_sd}")
        if not self.continuous_covariates:
            raise ValueError("at least one continuous covariate is required")
        if set(self.continuous_covariates) & set(self.exact_covariates):
            raise ValueError("continuous and exact covariates must be disjoint")
        unknown = [c for c in self.continuous_covariates if c not in CONTINUOUS_COVARIATES]
        unknown += [c for c in self.exact_covariates if c not in EXACT_COVARIATES]
        if unknown:
            raise ValueError(f"unknown covariates: {unknown}")
        if self.treatment_isp == self.control_isp:
            raise ValueError("treatment and control ISPs must differ")

    @property
    def label(self) -> str:
        if self.pair_id:
            return self.pair_id
        year = f"/{self.year}" if self.year is not None else ""
        return f"{self.treatment_isp} vs {self.control_isp} [{self.tier_bin}]{year}"

    @property
    def replacement_code(self) -> str:
        return "r" if self.with_replacement else "nr"

    @classmethod
    def from_settings(
        cls,
        pair: PairSpec,
        settings: MatchSettings,
        seed: int,
        with_replacement: bool = True,
    ) -> "MatchConfig":
        return cls(
            treatment_isp=pair.treat,
            control_isp=pair.control,
            tier_bin=pair.bin,
            year=pair.year,
            caliper_sd=settings.caliper_sd,
            with_replacement=with_replacement,
            continuous_covariates=tuple(settings.continuous),
            exact_covariates=tuple(settings.exact),
            seed=settings.seed if settings.seed is not None else seed,
            bootstrap=settings.bootstrap,
            pair_id=pair.pair_id,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# =============================================================================
# Samples
# =============================================================================

def build_samples(records: Sequence[TestRecord], profiles: Sequence, unit: str = "test") -> pd.DataFrame:
    """
    Sample store for matching: eligible households with a tier bin.

    Args:
        records: Validated records
        profiles: HouseholdProfiles; a profile with a year only covers that year's tests
        unit: "test" (one sample per test) or "household" (one per household-year,
              covariates averaged, os_class modal, peak_flag by majority)

    Returns:
        DataFrame with SAMPLE_COLUMNS; sample_id is the row position
    """
    if unit not in ("test", "household"):
        raise ValueError(f"unit must be 'test' or 'household', got {unit!r}")
    index = {(p.client_ip, p.year): p for p in profiles if p.eligible and p.tier_bin}

    rows = []
    for record in records:
        profile = index.get((record.client_ip, record.year)) or index.get((record.client_ip, None))
        if profile is None:
            continue
        rows.append({
            "isp": record.isp,
            "household": record.client_ip,
            "year": record.year,
            "tier_bin": profile.tier_bin,
            "download_mbps": record.download_mbps,
            "tier_mbps": profile.tier_mbps,
            "rwnd_bytes": record.rwnd_bytes,
            "min_rtt_ms": record.min_rtt_ms,
            "mss_bytes": record.mss_bytes,
            "client_limited_frac": record.client_limited_frac,
            "os_class": record.os_class.value,
            "peak_flag": record.peak,
        })
    frame = pd.DataFrame(rows, columns=SAMPLE_COLUMNS[1:])

    if unit == "household" and not frame.empty:
        grouped = frame.groupby(["household", "year"], sort=True)
        frame = grouped.agg(
            isp=("isp", "first"),
            tier_bin=("tier_bin", "first"),
            download_mbps=("download_mbps", "mean"),
            tier_mbps=("tier_mbps", "first"),
            rwnd_bytes=("rwnd_bytes", "mean"),
            min_rtt_ms=("min_rtt_ms", "mean"),
            mss_bytes=("mss_bytes", "mean"),
            client_limited_frac=("client_limited_frac", "mean"),
            os_class=("os_class", lambda s: modal_os_class(s).value),
            peak_flag=("peak_flag", lambda s: bool(s.mean() >= 0.5)),
        ).reset_index()

    frame.insert(0, "sample_id", np.arange(len(frame), dtype=int))
    return frame[SAMPLE_COLUMNS].reset_index(drop=True)


def select_groups(samples: pd.DataFrame, cfg: MatchConfig) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Treated and control samples for the config's bin and year."""
    mask = pd.Series(True, index=samples.index)
    if cfg.tier_bin is not None:
        mask &= samples["tier_bin"] == cfg.tier_bin
    if cfg.year is not None:
        mask &= samples["year"] == cfg.year
    scoped = samples[mask]
    return (
        scoped[scoped["isp"] == cfg.treatment_isp].reset_index(drop=True),
        scoped[scoped["isp"] == cfg.control_isp].reset_index(drop=True),
    )


# =============================================================================
# Distance
# =============================================================================

@dataclass
class Standardized:
    """Continuous covariates scaled by pooled SD; zero-SD columns removed."""
    treated: np.ndarray
    controls: np.ndarray
    sd: np.ndarray
    covariates: list[str]
    dropped: list[str] = field(default_factory=list)


def standardize(
    treated: pd.DataFrame,
    controls: pd.DataFrame,
    covariates: Sequence[str],
) -> Standardized:
    """
    Scale each covariate by its SD over treatment and control pooled together.

    Covariates that are constant across the pooled sample are dropped with a
    warning.
    """
    pooled = np.vstack([
        treated[list(covariates)].to_numpy(dtype=float),
        controls[list(covariates)].to_numpy(dtype=float),
    ])
    if pooled.shape[0] < 2:
        raise ValueError("standardize needs at least 2 samples")
    sd = pooled.std(axis=0, ddof=1)
    keep = sd > 0
    dropped = [c for c, k in zip(covariates, keep) if not k]
    if dropped:
        logger.warning("dropping constant covariates from distance: %s", dropped)
    kept = [c for c, k in zip(covariates, keep) if k]
    nt = len(treated)
    scaled = pooled[:, keep] / sd[keep]
    return Standardized(scaled[:nt], scaled[nt:], sd[keep], kept, dropped)


def inverse_covariance(z: np.ndarray) -> np.ndarray:
    """
    Inverse of the covariance of `z` (rows are samples).

    A singular matrix gets a ridge of 1e-8 * trace / p on the diagonal.
    """
    p = z.shape[1]
    if p == 0:
        return np.zeros((0, 0))
    cov = np.atleast_2d(np.cov(z, rowvar=False, ddof=1))
    if np.linalg.matrix_rank(cov) < p:
        ridge = 1e-8 * float(np.trace(cov)) / p
        logger.warning("singular covariance, adding ridge %.3g", ridge)
        cov = cov + ridge * np.eye(p)
    return np.linalg.inv(cov)


def mahalanobis(x: Sequence[float], y: Sequence[float], inv_cov: np.ndarray) -> float:
    """sqrt((x - y)^T S^-1 (x - y))"""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return math.sqrt(max(float(d @ inv_cov @ d), 0.0))


# =============================================================================
# Matching
# =============================================================================

@dataclass(frozen=True)
class MatchPair:
    treated_id: int
    control_id: int
    distance: float
    treated_mbps: float
    control_mbps: float

    @property
    def difference(self) -> float:
        return self.treated_mbps - self.control_mbps


@dataclass
class AteEstimate:
    ate_mbps: float | None
    ci95: tuple[float, float] | None
    n_pairs: int


@dataclass
class BalanceRow:
    covariate: str
    smd_before: float | None
    smd_after: float | None
    p_value_after: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MatchOutcome:
    config: MatchConfig
    pairs: list[MatchPair]
    n_treated: int
    n_controls: int
    matched_treated: int
    matched_controls: int
    discard_rate: float
    ate_mbps: float | None = None
    ci95: tuple[float, float] | None = None
    naive_diff_mbps: float | None = None
    balance: list[BalanceRow] = field(default_factory=list)
    dropped_covariates: list[str] = field(default_factory=list)

    @property
    def status(self) -> str:
        if self.n_treated == 0 or self.n_controls == 0:
            return NO_SAMPLES
        if self.ate_mbps is None:
            return INSUFFICIENT_SUPPORT
        return OK

    def to_dict(self, include_pairs: bool = False) -> dict:
        data = {
            "config": self.config.to_dict(),
            "status": self.status,
            "pairs": len(self.pairs),
            "n_treated": self.n_treated,
            "n_controls": self.n_controls,
            "matched_treated": self.matched_treated,
            "matched_controls": self.matched_controls,
            "discard_rate": self.discard_rate,
            "naive_diff": self.naive_diff_mbps,
            "ate": self.ate_mbps,
            "ci95": list(self.ci95) if self.ci95 else None,
            "balance": [row.to_dict() for row in self.balance],
            "dropped_covariates": self.dropped_covariates,
        }
        if include_pairs:
            data["pair_list"] = [asdict(p) for p in self.pairs]
        return data


def _exact_codes(treated: pd.DataFrame, controls: pd.DataFrame, covariates: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Integer code per distinct combination of exact covariates, shared by both groups."""
    if not covariates:
        return np.zeros(len(treated), dtype=int), np.zeros(len(controls), dtype=int)
    keys = pd.concat([treated[list(covariates)], controls[list(covariates)]], ignore_index=True).astype(str)
    codes, _ = pd.factorize(keys.agg("\x1f".join, axis=1))
    return codes[:len(treated)], codes[len(treated):]


def treated_order(treated_ids: np.ndarray, seed: int) -> np.ndarray:
    """Positions of treated samples in visiting order: sorted by id, then a seeded shuffle."""
    by_id = np.argsort(treated_ids, kind="mergesort")
    return by_id[np.random.default_rng(seed).permutation(by_id.size)]


def match_samples(treated: pd.DataFrame, controls: pd.DataFrame, cfg: MatchConfig) -> MatchOutcome:
    """
    Greedy caliper matching on Mahalanobis distance.

    Args:
        treated: Treatment-ISP samples (build_samples columns)
        controls: Control-ISP samples
        cfg: Matching parameters

    Returns:
        MatchOutcome with pairs and discard accounting (no ATE yet)
    """
    nt, nc = len(treated), len(controls)
    if nt == 0 or nc == 0:
        return MatchOutcome(cfg, [], nt, nc, 0, 0, 1.0)

    z = standardize(treated, controls, cfg.continuous_covariates)
    inv_cov = inverse_covariance(np.vstack([z.treated, z.controls]))
    raw_t = treated[z.covariates].to_numpy(dtype=float)
    raw_c = controls[z.covariates].to_numpy(dtype=float)
    limits = cfg.caliper_sd * z.sd

    codes_t, codes_c = _exact_codes(treated, controls, cfg.exact_covariates)
    ids_t = treated["sample_id"].to_numpy()
    ids_c = controls["sample_id"].to_numpy()
    speed_t = treated["download_mbps"].to_numpy(dtype=float)
    speed_c = controls["download_mbps"].to_numpy(dtype=float)

    available = np.ones(nc, dtype=bool)
    pairs: list[MatchPair] = []
    for i in treated_order(ids_t, cfg.seed):
        admissible = available & (codes_c == codes_t[i])
        admissible &= np.all(np.abs(raw_c - raw_t[i]) <= limits, axis=1)
        candidates = np.nonzero(admissible)[0]
        if candidates.size == 0:
            continue
        diff = z.controls[candidates] - z.treated[i]
        squared = np.einsum("ij,jk,ik->i", diff, inv_cov, diff)
        distance = np.sqrt(np.maximum(squared, 0.0))
        best = candidates[distance == distance.min()]
        j = best[np.argmin(ids_c[best])]
        pairs.append(MatchPair(
            treated_id=int(ids_t[i]),
            control_id=int(ids_c[j]),
            distance=float(distance[candidates == j][0]),
            treated_mbps=float(speed_t[i]),
            control_mbps=float(speed_c[j]),
        ))
        if not cfg.with_replacement:
            available[j] = False

    matched_controls = len({p.control_id for p in pairs})
    discard_rate = 1.0 - (len(pairs) + matched_controls) / (nt + nc)
    logger.debug("%s (%s): %d pairs, discard %.3f", cfg.label, cfg.replacement_code, len(pairs), discard_rate)
    return MatchOutcome(
        config=cfg,
        pairs=pairs,
        n_treated=nt,
        n_controls=nc,
        matched_treated=len(pairs),
        matched_controls=matched_controls,
        discard_rate=discard_rate,
        dropped_covariates=z.dropped,
    )


# =============================================================================
# Estimation
# =============================================================================

def estimate_ate(pairs: Sequence[MatchPair], bootstrap: int = 1000, seed: int = 0) -> AteEstimate:
    """
    Mean of (treated - control) over pairs, with a percentile bootstrap 95% CI.

    Pairs are resampled whole, so with replacement each treated unit carries its
    matched control. The interval is widened to contain the point estimate.
    Fewer than 2 pairs gives no CI; no pairs gives no ATE.
    """
    if not pairs:
        return AteEstimate(None, None, 0)
    diffs = np.array([p.difference for p in pairs])
    ate = float(diffs.mean())
    if diffs.size < 2:
        return AteEstimate(ate, None, 1)
    rng = np.random.default_rng(seed)
    means = diffs[rng.integers(0, diffs.size, size=(bootstrap, diffs.size))].mean(axis=1)
    low, high = np.percentile(means, [2.5, 97.5])
    return AteEstimate(ate, (min(float(low), ate), max(float(high), ate)), int(diffs.size))


def standardized_mean_difference(t: np.ndarray, c: np.ndarray) -> float | None:
    """(mean_T - mean_C) / sqrt((var_T + var_C) / 2); None when undefined."""
    if t.size == 0 or c.size == 0:
        return None
    var_t = float(t.var(ddof=1)) if t.size > 1 else 0.0
    var_c = float(c.var(ddof=1)) if c.size > 1 else 0.0
    pooled = math.sqrt(0.5 * (var_t + var_c))
    delta = float(t.mean() - c.mean())
    if pooled == 0.0:
        return 0.0 if delta == 0.0 else None
    return delta / pooled


def _welch_p(t: np.ndarray, c: np.ndarray) -> float | None:
    if t.size < 2 or c.size < 2:
        return None
    if t.var() == 0.0 and c.var() == 0.0:
        return 1.0 if t.mean() == c.mean() else 0.0
    return float(stats.ttest_ind(t, c, equal_var=False).pvalue)


def balance_report(
    treated: pd.DataFrame,
    controls: pd.DataFrame,
    pairs: Sequence[MatchPair],
    covariates: Sequence[str],
) -> list[BalanceRow]:
    """
    Per-covariate SMD on all samples (before) and matched samples (after), plus
    a Welch two-sample p-value after matching. Matched controls count once per
    pair they appear in.
    """
    t_index = treated.set_index("sample_id")
    c_index = controls.set_index("sample_id")
    t_ids = [p.treated_id for p in pairs]
    c_ids = [p.control_id for p in pairs]
    rows = []
    for name in covariates:
        before_t = treated[name].to_numpy(dtype=float)
        before_c = controls[name].to_numpy(dtype=float)
        after_t = t_index.loc[t_ids, name].to_numpy(dtype=float) if pairs else np.array([])
        after_c = c_index.loc[c_ids, name].to_numpy(dtype=float) if pairs else np.array([])
        rows.append(BalanceRow(
            covariate=name,
            smd_before=standardized_mean_difference(before_t, before_c),
            smd_after=standardized_mean_difference(after_t, after_c),
            p_value_after=_welch_p(after_t, after_c),
        ))
    return rows


def naive_difference(treated: pd.DataFrame, controls: pd.DataFrame) -> float | None:
    """Household-weighted mean speed difference: every household has one vote."""
    if treated.empty or controls.empty:
        return None
    t = treated.groupby("household")["download_mbps"].mean().mean()
    c = controls.groupby("household")["download_mbps"].mean().mean()
    return float(t - c)


def compare(treated: pd.DataFrame, controls: pd.DataFrame, cfg: MatchConfig) -> MatchOutcome:
    """Match, estimate the ATE and report balance for one config."""
    outcome = match_samples(treated, controls, cfg)
    outcome.naive_diff_mbps = naive_difference(treated, controls)
    estimate = estimate_ate(outcome.pairs, cfg.bootstrap, cfg.seed)
    outcome.ate_mbps, outcome.ci95 = estimate.ate_mbps, estimate.ci95
    if outcome.pairs:
        outcome.balance = balance_report(treated, controls, outcome.pairs, cfg.continuous_covariates)
    return outcome


# =============================================================================
# Ranking
# =============================================================================

@dataclass
class RankRow:
    pair_id: str
    treatment: str
    control: str
    tier_bin: str | None
    year: int | None
    n_treated: int
    n_controls: int
    naive_diff: float | None
    ate_r: float | None
    ci_r: tuple[float, float] | None
    discard_r: float
    ate_nr: float | None
    ci_nr: tuple[float, float] | None
    discard_nr: float
    status: str

    def to_row(self) -> dict[str, Any]:
        def _ci(ci, i):
            return None if ci is None else ci[i]
        return {
            "pair_id": self.pair_id,
            "treatment": self.treatment,
            "control": self.control,
            "tier_bin": self.tier_bin,
            "year": self.year,
            "n_treated": self.n_treated,
            "n_controls": self.n_controls,
            "naive": self.naive_diff,
            "ate_r": self.ate_r,
            "ci_lo_r": _ci(self.ci_r, 0),
            "ci_hi_r": _ci(self.ci_r, 1),
            "discard_r": self.discard_r,
            "ate_nr": self.ate_nr,
            "ci_lo_nr": _ci(self.ci_nr, 0),
            "ci_hi_nr": _ci(self.ci_nr, 1),
            "discard_nr": self.discard_nr,
            "status": self.status,
        }


RANK_COLUMNS = ["pair_id", "treatment", "control", "tier_bin", "year", "n_treated", "n_controls",
                "naive", "ate_r", "ci_lo_r", "ci_hi_r", "discard_r", "ate_nr", "ci_lo_nr",
                "ci_hi_nr", "discard_nr", "status"]


@dataclass
class PairComparison:
    """Both replacement modes for one config."""
    config: MatchConfig
    with_replacement: MatchOutcome
    without_replacement: MatchOutcome

    @property
    def status(self) -> str:
        if self.with_replacement.status != OK:
            return self.with_replacement.status
        return self.without_replacement.status

    def to_row(self) -> RankRow:
        r, nr = self.with_replacement, self.without_replacement
        return RankRow(
            pair_id=self.config.label,
            treatment=self.config.treatment_isp,
            control=self.config.control_isp,
            tier_bin=self.config.tier_bin,
            year=self.config.year,
            n_treated=r.n_treated,
            n_controls=r.n_controls,
            naive_diff=r.naive_diff_mbps,
            ate_r=r.ate_mbps,
            ci_r=r.ci95,
            discard_r=r.discard_rate,
            ate_nr=nr.ate_mbps,
            ci_nr=nr.ci95,
            discard_nr=nr.discard_rate,
            status=self.status,
        )

    def to_dict(self) -> dict:
        return {
            "pair_id": self.config.label,
            "r": self.with_replacement.to_dict(),
            "nr": self.without_replacement.to_dict(),
        }


def compare_both(cfg: MatchConfig, samples: pd.DataFrame) -> PairComparison:
    treated, controls = select_groups(samples, cfg)
    return PairComparison(
        config=cfg,
        with_replacement=compare(treated, controls, replace(cfg, with_replacement=True)),
        without_replacement=compare(treated, controls, replace(cfg, with_replacement=False)),
    )


def run_comparisons(configs: Sequence[MatchConfig], samples: pd.DataFrame, workers: int = 1) -> list[PairComparison]:
    """
    Run every config as an independent job over the shared, read-only sample
    store. `workers > 1` uses a thread pool; results keep config order and are
    identical to a sequential run.
    """
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda cfg: compare_both(cfg, samples), configs))
    return [compare_both(cfg, samples) for cfg in configs]


def sort_rows(rows: Sequence[RankRow]) -> list[RankRow]:
    """Ascending naive difference; pairs without data last."""
    return sorted(rows, key=lambda r: (r.naive_diff is None, r.naive_diff if r.naive_diff is not None else 0.0))


def rank_pairs(configs: Sequence[MatchConfig], samples: pd.DataFrame, workers: int = 1) -> list[RankRow]:
    """
    Compare every ISP pair with and without replacement, sorted by naive
    difference. Pairs without common support stay in the table, marked
    "insufficient common support".
    """
    return sort_rows([c.to_row() for c in run_comparisons(configs, samples, workers)])


def ranked_frame(rows: Sequence[RankRow]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in rows], columns=RANK_COLUMNS)
