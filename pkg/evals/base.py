"""
Base Eval Class

Defines the interface all evals must implement.
"""

from abc import abstractmethod, ABCMeta
from dataclasses import dataclass, field, asdict
from datetime import datetime
from typing import Any
import json
import time


@dataclass
class EvalResult:
    case_id: str
    passed: bool
    description: str
    expected: Any
    actual: Any
    error: str | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalSummary:
    eval_name: str
    timestamp: str
    total_cases: int
    passed: int
    failed: int
    pass_rate: float
    required_pass_rate: float
    elapsed_s: float
    results: list[EvalResult]
    metadata: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.total_cases > 0 and self.pass_rate >= self.required_pass_rate

    def to_dict(self) -> dict:
        return {
            "eval_name": self.eval_name,
            "timestamp": self.timestamp,
            "total_cases": self.total_cases,
            "passed": self.passed,
            "failed": self.failed,
            "pass_rate": self.pass_rate,
            "required_pass_rate": self.required_pass_rate,
            "ok": self.ok,
            "elapsed_s": self.elapsed_s,
            "results": [r.to_dict() for r in self.results],
            "metadata": self.metadata,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, default=str)


class BaseEval(metaclass=ABCMeta):

    name: str = "base_eval"
    description: str = "Base evaluation"
    # Share of cases that must pass for the eval to count as met
    required_pass_rate: float = 1.0

    @abstractmethod
    def get_test_cases(self) -> list[dict]:
        pass

    @abstractmethod
    def evaluate_case(self, case: dict) -> EvalResult:
        pass

    def summary_metadata(self, results: list[EvalResult]) -> dict:
        """Eval-wide figures added to the summary (override for aggregate checks)."""
        return {}

    def run(self, verbose: bool = True) -> EvalSummary:
        """
        Run every case.

        Args:
            verbose: Print progress to stdout

        Returns:
            EvalSummary with all results
        """
        test_cases = self.get_test_cases()
        results = []
        started = time.time()

        total = len(test_cases)
        for i, case in enumerate(test_cases, 1):
            if verbose:
                print(f"  [{i}/{total}] {case.get('id', 'unknown')[:40]}...", end=" ", flush=True)

            start_time = time.time()
            try:
                result = self.evaluate_case(case)
            except Exception as e:
                result = EvalResult(
                    case_id=case.get("id", "unknown"),
                    passed=False,
                    description=case.get("description", ""),
                    expected=case.get("expected"),
                    actual=None,
                    error=f"{type(e).__name__}: {e}",
                )
            results.append(result)

            if verbose:
                status = "✓" if result.passed else "✗"
                print(f"{status} ({time.time() - start_time:.1f}s)", flush=True)

        passed = sum(1 for r in results if r.passed)
        metadata = {"description": self.description}
        metadata.update(self.summary_metadata(results))

        return EvalSummary(
            eval_name=self.name,
            timestamp=datetime.now().isoformat(),
            total_cases=len(results),
            passed=passed,
            failed=len(results) - passed,
            pass_rate=passed / len(results) if results else 0.0,
            required_pass_rate=self.required_pass_rate,
            elapsed_s=round(time.time() - started, 2),
            results=results,
            metadata=metadata,
        )
