"""
Eval 1: Matching Oracle

`match_samples` against a brute-force reference on random small instances:
- 2 to 4 continuous covariates, up to 50 samples per group
- both replacement modes, calipers 0.1 and 0.2
- pair sets must be identical
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pandas as pd
from scipy.spatial import distance

from engine.config import CONTINUOUS_COVARIATES
from engine.matching import MatchConfig, match_samples, treated_order
from evals.base import BaseEval, EvalResult

INSTANCES = 200
CALIPERS = (0.1, 0.2)


def random_instance(seed: int) -> tuple[pd.DataFrame, pd.DataFrame, list[str], bool]:
    """Treated and control frames with shifted covariate means and an optional OS class."""
    rng = np.random.default_rng(seed)
    covariates = [str(c) for c in rng.choice(CONTINUOUS_COVARIATES, size=int(rng.integers(2, 5)), replace=False)]
    with_exact = bool(rng.random() < 0.5)
    nt, nc = int(rng.integers(5, 51)), int(rng.integers(5, 51))
    shift = rng.normal(0.0, 0.8, size=len(covariates))

    def frame(n: int, first_id: int, offset: np.ndarray) -> pd.DataFrame:
        data = {"sample_id": np.arange(first_id, first_id + n), "download_mbps": rng.uniform(1, 100, n)}
        for j, name in enumerate(covariates):
            data[name] = rng.normal(offset[j], 1.0, n)
        data["os_class"] = rng.choice(["ModernAutotuning", "LegacyNoAutotuning"], n) if with_exact else "Other"
        return pd.DataFrame(data)

    return frame(nt, 0, shift), frame(nc, nt, np.zeros(len(covariates))), covariates, with_exact


def reference_pairs(treated: pd.DataFrame, controls: pd.DataFrame, cfg: MatchConfig) -> list[tuple[int, int]]:
    """Nested-loop greedy matching with scipy's Mahalanobis distance."""
    names = list(cfg.continuous_covariates)
    pooled = pd.concat([treated[names], controls[names]]).to_numpy(dtype=float)
    sd = pooled.std(axis=0, ddof=1)
    z = pooled / sd
    inv_cov = np.linalg.inv(np.atleast_2d(np.cov(z, rowvar=False)))
    zt, zc = z[:len(treated)], z[len(treated):]
    raw_t = treated[names].to_numpy(dtype=float)
    raw_c = controls[names].to_numpy(dtype=float)
    ids_t = treated["sample_id"].to_numpy()
    ids_c = controls["sample_id"].to_numpy()
    exact_t = treated[list(cfg.exact_covariates)].to_numpy()
    exact_c = controls[list(cfg.exact_covariates)].to_numpy()

    used: set[int] = set()
    pairs = []
    for i in treated_order(ids_t, cfg.seed):
        best = None
        for j in range(len(controls)):
            if not cfg.with_replacement and j in used:
                continue
            if any(exact_t[i, k] != exact_c[j, k] for k in range(exact_t.shape[1])):
                continue
            if any(abs(raw_t[i, k] - raw_c[j, k]) > cfg.caliper_sd * sd[k] for k in range(len(names))):
                continue
            d = distance.mahalanobis(zt[i], zc[j], inv_cov)
            key = (d, int(ids_c[j]))
            if best is None or key < best[0]:
                best = (key, j)
        if best is None:
            continue
        j = best[1]
        pairs.append((int(ids_t[i]), int(ids_c[j])))
        used.add(j)
    return pairs


class MatchingOracleEval(BaseEval):
    """
    Exact agreement with the reference for every mode and caliper.
    """

    name = "matching_oracle"
    description = "Greedy caliper matching agrees with a brute-force reference"
    required_pass_rate = 1.0

    def get_test_cases(self) -> list[dict]:
        return [
            {"id": f"instance_{seed:03d}", "seed": seed, "description": "random instance, 4 mode/caliper combinations"}
            for seed in range(INSTANCES)
        ]

    def evaluate_case(self, case: dict) -> EvalResult:
        treated, controls, covariates, with_exact = random_instance(case["seed"])
        mismatches = []
        for caliper in CALIPERS:
            for with_replacement in (True, False):
                cfg = MatchConfig(
                    treatment_isp="T",
                    control_isp="C",
                    caliper_sd=caliper,
                    with_replacement=with_replacement,
                    continuous_covariates=tuple(covariates),
                    exact_covariates=("os_class",) if with_exact else (),
                    seed=case["seed"],
                )
                got = [(p.treated_id, p.control_id) for p in match_samples(treated, controls, cfg).pairs]
                want = reference_pairs(treated, controls, cfg)
                if got != want:
                    mismatches.append({"caliper": caliper, "mode": cfg.replacement_code,
                                       "got": len(got), "want": len(want)})

        return EvalResult(
            case_id=case["id"],
            passed=not mismatches,
            description=case["description"],
            expected="identical pair lists",
            actual="identical" if not mismatches else mismatches,
            details={"n_treated": len(treated), "n_controls": len(controls), "covariates": covariates},
        )
