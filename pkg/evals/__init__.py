"""
ISP Matching Acceptance Suite

Coverage for:

1. Matching Oracle     : Pair sets equal a brute-force reference
2. Debiasing           : Matched CI recovers an injected effect; shrinkage; discard pattern
3. Rho Mechanism       : Single households vs shared IPs
4. Estimator Oracles   : Pearson rho and Thompson Tau
5. Importance Ordering : Speed-tier first, ISP fourth or lower
6. Pipeline Accounting : Manifest funnel, refinement, determinism
"""

from .matching_oracle import MatchingOracleEval
from .debiasing import DebiasingEval, ShrinkageEval, DiscardPatternEval
from .rho_mechanism import RhoMechanismEval
from .estimator_oracles import EstimatorOraclesEval
from .importance_ordering import ImportanceOrderingEval
from .pipeline_accounting import PipelineAccountingEval
from .runner import EvalRunner

__all__ = [
    "MatchingOracleEval",
    "DebiasingEval",
    "ShrinkageEval",
    "DiscardPatternEval",
    "RhoMechanismEval",
    "EstimatorOraclesEval",
    "ImportanceOrderingEval",
    "PipelineAccountingEval",
    "EvalRunner",
]
