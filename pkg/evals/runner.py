"""
Eval Runner

Executes all evaluations and generates:
- Clear terminal output with scores
- JSON log files with unique timestamps
"""

import os
import sys
import json
import logging
from datetime import datetime
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dotenv import load_dotenv

from engine.config import env_log_level
from evals.base import BaseEval, EvalSummary
from evals.matching_oracle import MatchingOracleEval
from evals.debiasing import DebiasingEval, ShrinkageEval, DiscardPatternEval
from evals.rho_mechanism import RhoMechanismEval
from evals.estimator_oracles import EstimatorOraclesEval
from evals.importance_ordering import ImportanceOrderingEval
from evals.pipeline_accounting import PipelineAccountingEval

# Wall-clock limit for the whole suite, seconds
RUNTIME_LIMIT_S = 600


class EvalRunner:
    """
    Runs all evaluations and produces reports.
    """

    def __init__(self, logs_dir: str = "logs", only: list[str] | None = None):
        self.logs_dir = Path(logs_dir)
        self.logs_dir.mkdir(exist_ok=True)

        self.evals: list[BaseEval] = [
            MatchingOracleEval(),
            DebiasingEval(),
            ShrinkageEval(),
            DiscardPatternEval(),
            RhoMechanismEval(),
            EstimatorOraclesEval(),
            ImportanceOrderingEval(),
            PipelineAccountingEval(),
        ]
        if only:
            unknown = set(only) - {e.name for e in self.evals}
            if unknown:
                raise ValueError(f"unknown evals: {sorted(unknown)}")
            self.evals = [e for e in self.evals if e.name in only]

        self.results: list[EvalSummary] = []

    @property
    def elapsed_s(self) -> float:
        return sum(s.elapsed_s for s in self.results)

    def run_all(self, verbose: bool = True) -> list[EvalSummary]:
        """
        Run all evaluations.

        Returns:
            List of EvalSummary objects
        """
        self.results = []

        for eval in self.evals:
            print(f"\n{'='*60}")
            print(f"Running: {eval.name} ({len(eval.get_test_cases())} cases)")
            print(f"{'='*60}\n")

            summary = eval.run(verbose=verbose)
            self.results.append(summary)

            print(f"\n  → {summary.passed}/{summary.total_cases} passed "
                  f"({summary.pass_rate*100:.0f}%, need {summary.required_pass_rate*100:.0f}%) "
                  f"in {summary.elapsed_s:.1f}s")

        return self.results

    def print_summary(self):
        """Print a formatted summary to terminal."""
        print("\n")
        print("=" * 70)
        print("                         EVAL RESULTS SUMMARY")
        print("=" * 70)
        print()

        total_cases = 0
        total_passed = 0

        for summary in self.results:
            total_cases += summary.total_cases
            total_passed += summary.passed

            if summary.ok and summary.pass_rate == 1.0:
                status = "✓ PASS"
                color = "\033[92m"  # Green
            elif summary.ok:
                status = "⚠ PASS"
                color = "\033[93m"  # Yellow
            else:
                status = "✗ FAIL"
                color = "\033[91m"  # Red
            reset = "\033[0m"

            line = f"Pass Rate: {summary.pass_rate*100:6.1f}%  ({summary.passed}/{summary.total_cases} cases)"
            print(f"┌{'─'*68}┐")
            print(f"│ {summary.eval_name.upper():^66} │")
            print(f"├{'─'*68}┤")
            print(f"│  {color}{status}{reset}  {line:<58}│")
            print(f"└{'─'*68}┘")
            print()

            extra = {k: v for k, v in summary.metadata.items() if k != "description"}
            if extra:
                print(f"  {json.dumps(extra, default=str)}")

            failures = [r for r in summary.results if not r.passed]
            if failures:
                print(f"  Failed cases:")
                for f in failures[:5]:
                    print(f"    ✗ {f.case_id}: expected {str(f.expected)[:40]}, got {str(f.actual)[:40]}")
                    if f.error:
                        print(f"      Error: {f.error[:60]}...")
                if len(failures) > 5:
                    print(f"    ... and {len(failures)-5} more failures")
                print()

        overall_rate = total_passed / total_cases if total_cases > 0 else 0
        print("=" * 70)
        print(f"  OVERALL: {total_passed}/{total_cases} cases passed ({overall_rate*100:.1f}%)")
        print(f"  RUNTIME: {self.elapsed_s:.1f}s (limit {RUNTIME_LIMIT_S}s)")
        print("=" * 70)
        print()

    def save_logs(self) -> list[str]:
        """
        Save detailed results to JSON log files.

        Returns:
            List of log file paths created
        """
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        log_files = []

        for summary in self.results:
            filepath = self.logs_dir / f"{summary.eval_name}_{timestamp}.json"
            filepath.write_text(summary.to_json(), encoding="utf-8")
            log_files.append(str(filepath))
            print(f"  Saved: {filepath}")

        combined_filepath = self.logs_dir / f"eval_summary_{timestamp}.json"
        total = sum(s.total_cases for s in self.results)
        passed = sum(s.passed for s in self.results)
        combined = {
            "timestamp": timestamp,
            "evals": [s.to_dict() for s in self.results],
            "overall": {
                "total_cases": total,
                "total_passed": passed,
                "total_failed": total - passed,
                "pass_rate": passed / total if total else 0,
                "all_met": all(s.ok for s in self.results),
                "elapsed_s": self.elapsed_s,
            },
        }
        combined_filepath.write_text(json.dumps(combined, indent=2, default=str), encoding="utf-8")
        log_files.append(str(combined_filepath))
        print(f"  Saved: {combined_filepath}")

        return log_files


def main():
    """Main entry point for running evals from command line."""
    import argparse

    parser = argparse.ArgumentParser(description="Run the ISP matching acceptance suite")
    parser.add_argument("--logs-dir", default="logs",
                        help="Directory for log files (default: logs)")
    parser.add_argument("--only", nargs="+", metavar="EVAL",
                        help="Run only the named evals")
    parser.add_argument("--quiet", action="store_true",
                        help="No per-case progress")
    parser.add_argument("--no-save", action="store_true",
                        help="Don't save log files")
    args = parser.parse_args()

    load_dotenv()
    # Stage warnings only when ISPM_LOG_LEVEL is set
    logging.basicConfig(level=env_log_level() if "ISPM_LOG_LEVEL" in os.environ else "ERROR")

    print()
    print("╔══════════════════════════════════════════════════════════════════╗")
    print("║                  ISP MATCHING ACCEPTANCE SUITE                   ║")
    print("║                                                                  ║")
    print("║  1. Matching oracle     - brute-force pair agreement            ║")
    print("║  2. Debiasing           - CI covers the injected effect         ║")
    print("║  3. Shrinkage / discard - matched vs naive, r vs nr             ║")
    print("║  4. Rho mechanism       - single household vs shared IP         ║")
    print("║  5. Estimator oracles   - Pearson and Thompson Tau              ║")
    print("║  6. Importance ordering - tier first, ISP fourth or lower       ║")
    print("║  7. Pipeline accounting - funnel, refinement, determinism       ║")
    print("╚══════════════════════════════════════════════════════════════════╝")
    print()
    print(f"Logs:    {args.logs_dir}/")
    print()

    runner = EvalRunner(logs_dir=args.logs_dir, only=args.only)
    runner.run_all(verbose=not args.quiet)

    runner.print_summary()

    if not args.no_save:
        print("Saving logs...")
        runner.save_logs()

    all_met = all(s.ok for s in runner.results) and runner.elapsed_s < RUNTIME_LIMIT_S
    sys.exit(0 if all_met else 1)


if __name__ == "__main__":
    main()
