"""
Eval 6: Pipeline Accounting

End-to-end runs of `run_pipeline`:
- Test accounting on a fixture shaped like a real ISP-year (117,019 raw tests,
  11,180 from households over the threshold): retained fraction 9.6% +- 0.1%
- Filter counts are monotone on every run
- Refinement drops shared IPs and moves the ranked estimate toward the truth
- Re-running with the same seeds reproduces every artifact byte for byte
"""

import sys
import os
import json
import tempfile
from pathlib import Path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from engine.config import ImportanceSettings, InputSettings, MatchSettings, PairSpec, PipelineConfig, ReportSettings
from engine.ingest import OsClass, TestRecord, local_hour_for, write_records
from engine.report import MANIFEST_NAME, run_pipeline
from engine.synth import generate
from evals.base import BaseEval, EvalResult
from evals.scenarios import nat_vs_single, os_skewed_pair, tier_settings

RAW_TESTS = 117_019
THRESHOLDED_TESTS = 11_180
FUNNEL = ("raw_rows", "records", "thresholded_tests", "eligible_tests", "matched_samples")


def accounting_fixture() -> list[TestRecord]:
    """
    One AU ISP in 2015: 559 IPs with exactly 20 tests (kept), 5,570 IPs with 19
    and one with 9 (below the threshold).
    """
    counts = [20] * (THRESHOLDED_TESTS // 20) + [19] * 5570 + [9]
    start = 1420070400.0  # 2015-01-01T00:00:00Z
    offset = 600
    records = []
    for i, n in enumerate(counts):
        ip = f"10.{(i >> 16) & 255}.{(i >> 8) & 255}.{i & 255}"
        for k in range(n):
            stamp = start + k * 86400.0 * 7 + 3600.0 * (k % 12)
            records.append(TestRecord(
                client_ip=ip,
                timestamp_utc=stamp,
                utc_offset_minutes=offset,
                local_hour=local_hour_for(stamp, offset),
                isp="Telstra",
                country="AU",
                download_mbps=10.0 + (k % 5),
                min_rtt_ms=20.0,
                mss_bytes=1460.0,
                rwnd_bytes=262144.0,
                os_class=OsClass.MODERN_AUTOTUNING,
                congestion_count=5 - (k % 5),
                client_limited_frac=0.0,
            ))
    return records


def synthetic_config(records_path: Path, seed: int, refine: bool = True, bin: str = "30-50") -> PipelineConfig:
    return PipelineConfig(
        seed=seed,
        input=InputSettings(records=records_path),
        tiers=tier_settings(min_tests=20, refine=refine),
        importance=ImportanceSettings(trees=10, max_depth=6, repeats=1),
        match=MatchSettings(bootstrap=200),
        pair=[PairSpec(treat="ISP-A", control="ISP-B", bin=bin)],
        report=ReportSettings(format="json"),
    )


def funnel_monotone(manifest: dict) -> bool:
    values = [manifest["funnel"][name] for name in FUNNEL]
    return all(a >= b for a, b in zip(values, values[1:]))


def artifact_digest(out_dir: Path) -> dict[str, bytes]:
    """Every file's bytes, with the manifest's timestamp removed."""
    files = {}
    for path in sorted(out_dir.rglob("*")):
        if not path.is_file():
            continue
        data = path.read_bytes()
        if path.name == MANIFEST_NAME:
            manifest = json.loads(data)
            manifest.pop("created_at", None)
            data = json.dumps(manifest, sort_keys=True).encode()
        files[str(path.relative_to(out_dir))] = data
    return files


class PipelineAccountingEval(BaseEval):

    name = "pipeline_accounting"
    description = "Manifest accounting, monotone filters, refinement and determinism"
    required_pass_rate = 1.0

    def get_test_cases(self) -> list[dict]:
        return [
            {"id": "table_i_fixture", "kind": "accounting", "description": "retained 11,180 / 117,019 = 9.6%"},
            *[
                {"id": f"funnel_seed_{seed}", "kind": "funnel", "seed": seed,
                 "description": "raw >= records >= thresholded >= eligible >= matched"}
                for seed in (21, 22, 23)
            ],
            {"id": "refined_vs_unrefined", "kind": "refine", "seed": 31,
             "description": "refinement drops rho > 0 IPs and moves the ATE toward zero"},
            {"id": "determinism", "kind": "determinism", "seed": 41,
             "description": "identical seeds give identical artifacts"},
        ]

    def evaluate_case(self, case: dict) -> EvalResult:
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            handler = getattr(self, f"_{case['kind']}")
            passed, expected, actual, details = handler(case, tmp)
        return EvalResult(case["id"], passed, case["description"], expected, actual, details=details)

    def _accounting(self, case: dict, tmp: Path):
        records_path = write_records(accounting_fixture(), tmp / "fixture.csv")
        config = PipelineConfig(
            seed=0,
            input=InputSettings(records=records_path),
            importance=ImportanceSettings(enabled=False),
        )
        manifest = run_pipeline(config, tmp / "out").manifest
        row = next(r for r in manifest["counts"]["accounting"] if r["isp"] == "Telstra" and r["year"] == 2015)
        fraction = row["retained_fraction"]
        passed = (
            row["raw_tests"] == RAW_TESTS
            and row["thresholded_tests"] == THRESHOLDED_TESTS
            and abs(fraction - 0.096) <= 0.001
            and funnel_monotone(manifest)
        )
        return passed, {"raw": RAW_TESTS, "thresholded": THRESHOLDED_TESTS, "retained": "9.6% +- 0.1%"}, \
            {"raw": row["raw_tests"], "thresholded": row["thresholded_tests"], "retained": round(fraction, 5)}, \
            {"funnel": manifest["funnel"]}

    def _funnel(self, case: dict, tmp: Path):
        records = generate(os_skewed_pair(case["seed"], 1.0, households=40)).records
        config = synthetic_config(write_records(records, tmp / "records.csv"), case["seed"])
        manifest = run_pipeline(config, tmp / "out").manifest
        return funnel_monotone(manifest), "monotone", manifest["funnel"], {}

    def _refine(self, case: dict, tmp: Path):
        records_path = write_records(generate(nat_vs_single(case["seed"])).records, tmp / "records.csv")
        results = {}
        for refine in (True, False):
            config = synthetic_config(records_path, case["seed"], refine=refine, bin="75-100")
            config.importance.enabled = False
            results[refine] = run_pipeline(config, tmp / f"out_{refine}")

        refined, unrefined = results[True], results[False]
        shared_kept = [p.client_ip for p in refined.profiles if p.eligible and p.rho is not None and p.rho > 0]
        ate_refined = refined.comparisons[0].with_replacement.ate_mbps
        ate_unrefined = unrefined.comparisons[0].with_replacement.ate_mbps
        passed = (
            not shared_kept
            and ate_refined is not None
            and ate_unrefined is not None
            and abs(ate_refined) < abs(ate_unrefined)
        )
        return passed, "no eligible rho > 0; |ate refined| < |ate unrefined|", \
            {"ate_refined": ate_refined, "ate_unrefined": ate_unrefined, "shared_kept": len(shared_kept)}, \
            {"eligible_refined": refined.manifest["counts"]["eligible_households"],
             "eligible_unrefined": unrefined.manifest["counts"]["eligible_households"]}

    def _determinism(self, case: dict, tmp: Path):
        records = generate(os_skewed_pair(case["seed"], 1.0, households=40)).records
        records_path = write_records(records, tmp / "records.csv")
        first = artifact_digest(run_pipeline(synthetic_config(records_path, case["seed"]), tmp / "a").out_dir)
        second = artifact_digest(run_pipeline(synthetic_config(records_path, case["seed"]), tmp / "b").out_dir)
        differing = sorted(name for name in first.keys() | second.keys() if first.get(name) != second.get(name))
        return not differing, "no differing files", differing or "identical", {"files": len(first)}
