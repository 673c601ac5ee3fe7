"""
Eval 2: Debiasing

Synthetic ISP pairs with a known injected effect and confounded covariates:
- Recovery: the matched ATE's 95% CI covers the true effect while the naive
  difference misses it by more than 1 Mbps
- Shrinkage: with no true effect, matched estimates sit closer to zero than
  naive differences, and a negative effect hidden behind a positive naive
  difference is recovered with the right sign
- Discard pattern: with replacement discards less than without, and a
  narrower caliper never discards less
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from engine.matching import MatchConfig, compare, match_samples, select_groups
from engine.synth import generate
from evals.base import BaseEval, EvalResult
from evals.scenarios import os_skewed_pair, rwnd_skewed_pair, samples_for, tier_settings

EFFECTS = (-2.0, 0.0, 2.0)
RUNS = 50
HOUSEHOLDS = 300
# Per ISP; two ISPs make a 10k-household dataset
SCALE_HOUSEHOLDS = 5000
TESTS = 24


def household_config(seed: int, with_replacement: bool = False) -> MatchConfig:
    return MatchConfig(
        treatment_isp="ISP-A",
        control_isp="ISP-B",
        tier_bin=None,
        caliper_sd=0.2,
        with_replacement=with_replacement,
        continuous_covariates=("rwnd_bytes", "min_rtt_ms"),
        exact_covariates=("os_class",),
        seed=seed,
        bootstrap=1000,
    )


def run_os_skewed(seed: int, effect: float, households: int = HOUSEHOLDS, with_replacement: bool = False):
    records = generate(os_skewed_pair(seed, effect, households, TESTS)).records
    samples = samples_for(records, tier_settings(min_tests=20), unit="household")
    treated, controls = select_groups(samples, household_config(seed))
    return compare(treated, controls, household_config(seed, with_replacement))


def _covers(ci, value: float) -> bool:
    return ci is not None and ci[0] <= value <= ci[1]


class DebiasingEval(BaseEval):
    """
    Matched CI covers the injected effect in at least 90% of runs: 50 runs at
    300 households per ISP plus one run per effect at 10k households.
    """

    name = "debiasing"
    description = "Matched ATE recovers an injected ISP effect that naive means miss"
    required_pass_rate = 0.9

    def get_test_cases(self) -> list[dict]:
        runs = [
            {
                "id": f"run_{i:02d}_tau_{EFFECTS[i % 3]:+.0f}",
                "seed": 1000 + i,
                "effect": EFFECTS[i % 3],
                "households": HOUSEHOLDS,
                "description": "OS-skewed pair, household unit, without replacement",
            }
            for i in range(RUNS)
        ]
        scale = [
            {
                "id": f"scale_10k_tau_{effect:+.0f}",
                "seed": 5000 + i,
                "effect": effect,
                "households": SCALE_HOUSEHOLDS,
                "description": "OS-skewed pair at 10k households",
            }
            for i, effect in enumerate(EFFECTS)
        ]
        return runs + scale

    def evaluate_case(self, case: dict) -> EvalResult:
        effect = case["effect"]
        outcome = run_os_skewed(case["seed"], effect, case["households"])
        naive_gap = abs(outcome.naive_diff_mbps - effect) if outcome.naive_diff_mbps is not None else None
        biased = naive_gap is not None and naive_gap > 1.0
        covered = _covers(outcome.ci95, effect)
        return EvalResult(
            case_id=case["id"],
            passed=biased and covered,
            description=case["description"],
            expected={"effect": effect, "naive_gap": "> 1", "ci_covers": True},
            actual={"naive": outcome.naive_diff_mbps, "ate": outcome.ate_mbps, "ci95": outcome.ci95},
            error=None if biased else "naive difference is not biased by the construction",
            details={"households": case["households"], "pairs": len(outcome.pairs), "discard": outcome.discard_rate},
        )

    def summary_metadata(self, results: list[EvalResult]) -> dict:
        covered = sum(1 for r in results if r.actual and _covers(r.actual["ci95"], r.expected["effect"]))
        return {"coverage": covered / len(results) if results else 0.0}


class ShrinkageEval(BaseEval):
    """
    Zero-effect suite: mean |matched ATE| < mean |naive|. Sign-flip suite: naive
    above zero, true effect below, matched CI strictly below zero.
    """

    name = "shrinkage"
    description = "Matching shrinks confounded ISP differences toward the truth"
    required_pass_rate = 1.0

    def get_test_cases(self) -> list[dict]:
        zero = [
            {"id": f"null_{i:02d}", "seed": 2000 + i, "effect": 0.0, "kind": "null",
             "description": "zero effect, OS-skewed covariates"}
            for i in range(20)
        ]
        flips = [
            {"id": f"sign_flip_{i}", "seed": 3000 + i, "effect": -2.0, "kind": "flip",
             "description": "negative effect behind a positive naive difference"}
            for i in range(3)
        ]
        return zero + flips

    def evaluate_case(self, case: dict) -> EvalResult:
        outcome = run_os_skewed(case["seed"], case["effect"], households=150)
        naive, ate, ci = outcome.naive_diff_mbps, outcome.ate_mbps, outcome.ci95
        if case["kind"] == "null":
            passed = ate is not None and naive is not None and abs(ate) < abs(naive)
            expected = "|ate| < |naive|"
        else:
            passed = naive is not None and naive > 0 and ci is not None and ci[1] < 0
            expected = "naive > 0 and ci95 below 0"
        return EvalResult(
            case_id=case["id"],
            passed=passed,
            description=case["description"],
            expected=expected,
            actual={"naive": naive, "ate": ate, "ci95": ci},
        )

    def summary_metadata(self, results: list[EvalResult]) -> dict:
        null = [r.actual for r in results if r.case_id.startswith("null") and r.actual and r.actual["ate"] is not None]
        if not null:
            return {}
        mean_ate = float(np.mean([abs(a["ate"]) for a in null]))
        mean_naive = float(np.mean([abs(a["naive"]) for a in null]))
        return {"mean_abs_ate": mean_ate, "mean_abs_naive": mean_naive, "shrinks": mean_ate < mean_naive}


class DiscardPatternEval(BaseEval):
    """
    On covariate-skewed bins where controls are scarce:
    discard(r, 0.2) < discard(nr, 0.2), discard(., 0.1) >= discard(., 0.2).
    """

    name = "discard_pattern"
    description = "Replacement and caliper width move the discard rate the expected way"
    required_pass_rate = 1.0

    def get_test_cases(self) -> list[dict]:
        return [
            {"id": f"seed_{seed}", "seed": 4000 + seed, "description": "rwnd-skewed pair, test unit"}
            for seed in range(10)
        ]

    def evaluate_case(self, case: dict) -> EvalResult:
        records = generate(rwnd_skewed_pair(case["seed"])).records
        samples = samples_for(records, tier_settings(min_tests=10, refine=False), unit="test")
        rates = {}
        treated = controls = None
        for caliper in (0.1, 0.2):
            for with_replacement in (True, False):
                cfg = MatchConfig(
                    treatment_isp="ISP-A",
                    control_isp="ISP-B",
                    caliper_sd=caliper,
                    with_replacement=with_replacement,
                    continuous_covariates=("rwnd_bytes", "min_rtt_ms"),
                    exact_covariates=(),
                    seed=case["seed"],
                )
                if treated is None:
                    treated, controls = select_groups(samples, cfg)
                rates[f"{cfg.replacement_code}@{caliper}"] = match_samples(treated, controls, cfg).discard_rate

        checks = {
            "r < nr at 0.2": rates["r@0.2"] < rates["nr@0.2"],
            "r: 0.1 >= 0.2": rates["r@0.1"] >= rates["r@0.2"],
            "nr: 0.1 >= 0.2": rates["nr@0.1"] >= rates["nr@0.2"],
        }
        return EvalResult(
            case_id=case["id"],
            passed=all(checks.values()),
            description=case["description"],
            expected={name: True for name in checks},
            actual=checks,
            details={"discard": rates, "n_treated": len(treated), "n_controls": len(controls)},
        )
