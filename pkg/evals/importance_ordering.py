"""
Eval 5: Importance Ordering

With speed driven by tier, then receive window, then RTT, and only a small
ISP gap, permutation importance must put the speed-tier first and the ISP no
higher than fourth in at least 18 of 20 seeds.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from engine.importance import build_feature_matrix, fit_forest, permutation_importance
from engine.synth import generate
from evals.base import BaseEval, EvalResult
from evals.scenarios import importance_mix, profiles_for, tier_settings

SEEDS = 20
TREES = 20


class ImportanceOrderingEval(BaseEval):

    name = "importance_ordering"
    description = "Speed-tier ranks first, ISP ranks fourth or lower"
    required_pass_rate = 0.9

    def get_test_cases(self) -> list[dict]:
        return [
            {"id": f"seed_{seed:02d}", "seed": 500 + seed, "description": "tier > rwnd > rtt, 1 Mbps ISP gap"}
            for seed in range(SEEDS)
        ]

    def evaluate_case(self, case: dict) -> EvalResult:
        records = generate(importance_mix(case["seed"])).records
        profiles = profiles_for(records, tier_settings(min_tests=10))
        matrix = build_feature_matrix(records, profiles)
        forest = fit_forest(matrix, trees=TREES, max_depth=8, min_leaf=10, seed=case["seed"])
        report = permutation_importance(forest, matrix, repeats=2, seed=case["seed"])

        tier_rank, isp_rank = report.rank_of("tier_mbps"), report.rank_of("isp")
        return EvalResult(
            case_id=case["id"],
            passed=tier_rank == 1 and isp_rank >= 4,
            description=case["description"],
            expected={"tier_mbps": 1, "isp": ">= 4"},
            actual={"tier_mbps": tier_rank, "isp": isp_rank},
            details={
                "ranking": [e.feature for e in report.ranked()],
                "tier_score": report.score_of("tier_mbps"),
                "isp_score": report.score_of("isp"),
                "oob_r2": report.metadata.get("oob_r2"),
            },
        )
