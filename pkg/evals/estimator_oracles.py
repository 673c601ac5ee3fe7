"""
Eval 4: Estimator Oracles

- pearson_rho against a textbook two-pass computation on random vectors
- reject_outliers_tau against decisions worked out by hand from a t-table
"""

import sys
import os
import math
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from engine.tiers import pearson_rho, reject_outliers_tau, thompson_tau
from evals.base import BaseEval, EvalResult

VECTORS = 1000
BATCH = 100
TOLERANCE = 1e-12

# Tau for alpha = 0.05 from two-sided t critical values (df = n - 2):
# n=3: 1.1511, n=4: 1.4250, n=5: 1.5712, n=10: 1.7984, n=12: 1.8290
TAU_TABLE = {3: 1.1511, 4: 1.4250, 5: 1.5712, 10: 1.7984, 12: 1.8290}

TAU_FIXTURES = [
    {
        "id": "tau_single_spike",
        "speeds": [10, 12, 11, 60],
        "rejected": [60],
        # n=4: mean 23.25, sd 24.51, |60 - 23.25| = 36.75 > 1.4250 * 24.51 = 34.93
        # n=3: mean 11, sd 1, max deviation 1 < 1.1511
    },
    {
        "id": "tau_outlier_near_60",
        "speeds": [20, 21, 19, 20, 22, 18, 20, 21, 19, 60],
        "rejected": [60],
        # n=10: mean 24, sd 12.70, 36 > 22.84; n=9: mean 20, sd 1.225, 2 < 2.177
    },
    {
        "id": "tau_two_outliers_near_60",
        "speeds": [20, 21, 19, 20, 22, 18, 20, 21, 19, 20, 58, 61],
        "rejected": [61, 58],
        # n=12: 34.42 > 28.21; n=11: 34.55 > 20.89; n=10: 2 < 2.077
    },
    {
        "id": "tau_clean_ramp",
        "speeds": [10, 11, 12, 13, 14],
        "rejected": [],
        # n=5: sd 1.581, 2 < 2.484
    },
    {
        "id": "tau_constant",
        "speeds": [5, 5, 5, 5],
        "rejected": [],
    },
    {
        "id": "tau_too_short",
        "speeds": [1, 100],
        "rejected": [],
    },
]


def textbook_pearson(xs: list[float], ys: list[float]) -> float | None:
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    if sxx == 0 or syy == 0:
        return None
    return sxy / math.sqrt(sxx * syy)


class EstimatorOraclesEval(BaseEval):

    name = "estimator_oracles"
    description = "Pearson rho and Thompson Tau agree with reference computations"
    required_pass_rate = 1.0

    def get_test_cases(self) -> list[dict]:
        pearson = [
            {"id": f"pearson_batch_{b}", "kind": "pearson", "seed": b,
             "description": f"{BATCH} random vectors within {TOLERANCE}"}
            for b in range(VECTORS // BATCH)
        ]
        table = [{"id": "tau_table", "kind": "tau_table", "description": "tau(n) matches the t-table"}]
        fixtures = [dict(f, kind="tau", description="hand-computed rejections") for f in TAU_FIXTURES]
        return pearson + table + fixtures

    def evaluate_case(self, case: dict) -> EvalResult:
        kind = case["kind"]
        if kind == "pearson":
            rng = np.random.default_rng(case["seed"])
            worst = 0.0
            for _ in range(BATCH):
                n = int(rng.integers(3, 200))
                xs = rng.normal(rng.uniform(-50, 50), rng.uniform(0.1, 20), n)
                ys = 0.5 * xs + rng.poisson(5, n)
                got = pearson_rho(xs, ys)
                want = textbook_pearson(xs.tolist(), ys.tolist())
                if (got is None) != (want is None):
                    worst = math.inf
                    break
                if got is not None:
                    worst = max(worst, abs(got - max(-1.0, min(1.0, want))))
            return EvalResult(case["id"], worst <= TOLERANCE, case["description"], f"<= {TOLERANCE}", worst)

        if kind == "tau_table":
            got = {n: round(thompson_tau(n), 4) for n in TAU_TABLE}
            passed = all(abs(got[n] - TAU_TABLE[n]) <= 2e-3 for n in TAU_TABLE)
            return EvalResult(case["id"], passed, case["description"], TAU_TABLE, got)

        result = reject_outliers_tau(case["speeds"])
        return EvalResult(
            case_id=case["id"],
            passed=result.rejected == [float(s) for s in case["rejected"]],
            description=case["description"],
            expected=case["rejected"],
            actual=result.rejected,
            details={"retained": result.retained},
        )
