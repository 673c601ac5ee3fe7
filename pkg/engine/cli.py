"""
Command-line interface.

    python -m engine.cli <command> [options]

Exit codes: 0 success, 1 bad input data, 2 config error, 3 stage failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd
from dotenv import load_dotenv

from .config import ConfigError, TierSettings, env_log_level, env_seed, load_pipeline_config, load_suite
from .household import aggregate_monthly, monthly_median_series, test_count_ccdf
from .importance import build_feature_matrix, fit_forest, permutation_importance
from .ingest import load_os_rules, load_prefix_map, load_tz_table, parse_records, read_records, write_records
from .matching import MatchConfig, build_samples, compare, rank_pairs, ranked_frame, select_groups
from .report import StageError, ccdf_plot, emit, rho_hist_plot, run_pipeline
from .synth import InfeasibleSpecError, generate, load_synth_spec, write_truth
from .tiers import TierBins, build_profiles, group_by_ip, monthly_rho, read_profiles, rho_distribution, write_profiles

logger = logging.getLogger("engine.cli")

EXIT_OK = 0
EXIT_DATA = 1
EXIT_CONFIG = 2
EXIT_STAGE = 3


# =============================================================================
# Helpers
# =============================================================================

def _threshold_settings(args, settings: TierSettings | None = None) -> TierSettings:
    """Apply --min-tests, scoped to --country when one is given."""
    settings = settings or TierSettings()
    min_tests = getattr(args, "min_tests", None)
    if min_tests is None:
        return settings
    country = getattr(args, "country", None)
    if country:
        settings.min_tests[country.upper()] = min_tests
    else:
        settings.min_tests = {}
        settings.default_min_tests = min_tests
    return settings


def _profiles_for(records, args, settings: TierSettings | None = None):
    if getattr(args, "profiles", None):
        return read_profiles(args.profiles)
    settings = _threshold_settings(args, settings)
    years = sorted({r.year for r in records})
    return [p for year in years for p in build_profiles(records, settings, year)]


def _write_json(data, path: str | None) -> None:
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# =============================================================================
# Commands
# =============================================================================

def cmd_ingest(args) -> int:
    rules = load_os_rules(args.os_rules) if args.os_rules else None
    result = parse_records(args.input, load_prefix_map(args.prefix_map), load_tz_table(args.tz), rules)
    write_records(result.records, args.out)
    if args.rejects:
        result.rejects.write(args.rejects)
    summary = result.to_dict()
    print(f"ingested {summary['accepted']}/{summary['total_rows']} rows, {summary['rejected']} rejected")
    for reason, count in summary["reasons"].items():
        print(f"  {count:6d}  {reason}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    records = read_records(args.input)
    months = aggregate_monthly(records, args.statistic)
    pairs = sorted({(m.isp, m.country) for m in months if args.country is None or m.country == args.country})
    rows = [
        {"year_month": p.year_month, "median_mbps": p.median_mbps, "isp": isp, "country": country}
        for isp, country in pairs
        for p in monthly_median_series(months, isp, country)
    ]
    pd.DataFrame(rows, columns=["year_month", "median_mbps", "isp", "country"]).to_csv(args.out, index=False)
    print(f"wrote {len(rows)} monthly medians for {len(pairs)} ISPs to {args.out}")
    return EXIT_OK


def cmd_ccdf(args) -> int:
    months = aggregate_monthly(read_records(args.input))
    points = test_count_ccdf(months, args.window, args.year)
    emit(ccdf_plot(points, args.window, args.year), args.out)
    print(f"wrote {len(points)} CCDF points to {args.out}")
    return EXIT_OK


def cmd_profile(args) -> int:
    records = read_records(args.input)
    try:
        settings = TierSettings(
            bins=list(TierBins.from_spec(args.bins).edges),
            tau_alpha=args.alpha,
            refine=not args.no_refine,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if args.country:
        records = [r for r in records if r.country == args.country.upper()]
    settings = _threshold_settings(args, settings)
    years = [args.year] if args.year else sorted({r.year for r in records})
    profiles = [p for year in years for p in build_profiles(records, settings, year)]
    write_profiles(profiles, args.out)
    eligible = sum(1 for p in profiles if p.eligible)
    print(f"profiled {len(profiles)} IPs, {eligible} eligible -> {args.out}")
    return EXIT_OK


def cmd_rho_dist(args) -> int:
    profiles = read_profiles(args.input)
    histograms = rho_distribution(profiles, args.bin_width, args.isp)
    if args.isp not in histograms:
        print(f"no defined rho values for ISP {args.isp!r}", file=sys.stderr)
        return EXIT_DATA
    h = histograms[args.isp]
    emit(rho_hist_plot(h), args.out)
    print(f"{args.isp}: {h.count} IPs, mean rho {h.mean_rho:+.3f} -> {args.out}")
    return EXIT_OK


def cmd_rho_monthly(args) -> int:
    tests = group_by_ip(read_records(args.input)).get(args.ip, [])
    if not tests:
        print(f"no tests for IP {args.ip}", file=sys.stderr)
        return EXIT_DATA
    for month, rho in monthly_rho(tests):
        print(f"{month}  {'undefined' if rho is None else f'{rho:+.3f}'}")
    return EXIT_OK


def cmd_importance(args) -> int:
    records = read_records(args.input)
    matrix = build_feature_matrix(records, _profiles_for(records, args), args.country)
    if matrix.n_rows < 2:
        print(f"not enough rows with a speed-tier ({matrix.n_rows})", file=sys.stderr)
        return EXIT_DATA
    forest = fit_forest(matrix, args.trees, args.max_depth, args.min_leaf, args.features_per_split, args.seed)
    report = permutation_importance(forest, matrix, args.repeats, args.seed)
    report.to_frame().to_csv(args.out, index=False)
    for entry in report.ranked():
        print(f"  {entry.rank}. {entry.feature:<12} {entry.score:10.4f}  ({entry.share:5.1%})")
    return EXIT_OK


def cmd_match(args) -> int:
    records = read_records(args.input)
    samples = build_samples(records, _profiles_for(records, args), args.unit)
    try:
        cfg = MatchConfig(
            treatment_isp=args.treat,
            control_isp=args.control,
            tier_bin=args.bin,
            year=args.year,
            caliper_sd=args.caliper,
            with_replacement=args.replacement == "r",
            continuous_covariates=tuple(args.continuous.split(",")),
            exact_covariates=tuple(c for c in args.exact.split(",") if c),
            seed=args.seed,
            bootstrap=args.bootstrap,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    treated, controls = select_groups(samples, cfg)
    outcome = compare(treated, controls, cfg)
    _write_json(outcome.to_dict(), args.out)
    ate = "undefined" if outcome.ate_mbps is None else f"{outcome.ate_mbps:+.2f} Mbps"
    print(f"{cfg.label} ({cfg.replacement_code}): {len(outcome.pairs)} pairs, "
          f"discard {outcome.discard_rate:.1%}, ATE {ate}", file=sys.stdout if args.out else sys.stderr)
    return EXIT_OK


def cmd_rank(args) -> int:
    settings, pairs, seed = load_suite(args.suite)
    records = read_records(args.input)
    samples = build_samples(records, _profiles_for(records, args), settings.unit)
    configs = [MatchConfig.from_settings(pair, settings, seed) for pair in pairs]
    rows = rank_pairs(configs, samples, args.workers or settings.workers)
    ranked_frame(rows).to_csv(args.out, index=False)
    print(f"ranked {len(rows)} ISP pairs -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    result = generate(spec)
    write_records(result.records, args.out)
    if args.truth:
        write_truth(result.truth, args.truth)
    print(f"generated {len(result.records)} records for {len(result.truth.households)} households -> {args.out}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    config = load_pipeline_config(args.config)
    result = run_pipeline(config, args.out_dir)
    funnel = result.manifest["funnel"]
    print(f"pipeline complete -> {result.out_dir}")
    for name, count in funnel.items():
        print(f"  {name:<18} {count}")
    return EXIT_OK


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="engine.cli", description="Fair ISP speed comparison from speed-test records")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="Parse a raw export into normalized records")
    p.add_argument("--input", required=True)
    p.add_argument("--prefix-map", required=True)
    p.add_argument("--tz", required=True)
    p.add_argument("--os-rules")
    p.add_argument("--out", required=True)
    p.add_argument("--rejects")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("baseline", help="Monthly median household speed per ISP")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--group-by", choices=["isp"], default="isp")
    p.add_argument("--country")
    p.add_argument("--statistic", choices=["mean", "median"], default="mean")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("ccdf", help="CCDF of per-household test counts")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--window", choices=["year", "month"], default="year")
    p.add_argument("--year", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ccdf)

    p = sub.add_parser("profile", help="Household profiles: rho, eligibility, speed-tier")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--country")
    p.add_argument("--min-tests", type=int)
    p.add_argument("--bins", default="default", help='"default" or comma-separated edges')
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--year", type=int)
    p.add_argument("--no-refine", action="store_true", help="Raw maximum, no rho gate, no Tau")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("rho-dist", help="Normalized rho histogram for one ISP")
    p.add_argument("--in", dest="input", required=True, help="profiles.csv")
    p.add_argument("--isp", required=True)
    p.add_argument("--bin-width", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rho_dist)

    p = sub.add_parser("rho-monthly", help="Month-by-month rho for one IP")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ip", required=True)
    p.set_defaults(fn=cmd_rho_monthly)

    p = sub.add_parser("importance", help="Random-forest permutation importance")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--profiles")
    p.add_argument("--country")
    p.add_argument("--min-tests", type=int, help="Test threshold when profiling without --profiles")
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--max-depth", type=int, default=12)
    p.add_argument("--min-leaf", type=int, default=5)
    p.add_argument("--features-per-split", type=int)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_importance)

    p = sub.add_parser("match", help="Match one ISP pair in one tier bin")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--profiles")
    p.add_argument("--country", help="Country whose threshold --min-tests sets")
    p.add_argument("--min-tests", type=int, help="Test threshold when profiling without --profiles")
    p.add_argument("--treat", required=True)
    p.add_argument("--control", required=True)
    p.add_argument("--bin", required=True)
    p.add_argument("--year", type=int)
    p.add_argument("--caliper", type=float, default=0.2)
    p.add_argument("--replacement", choices=["r", "nr"], default="r")
    p.add_argument("--continuous", default="tier_mbps,rwnd_bytes,min_rtt_ms,mss_bytes")
    p.add_argument("--exact", default="os_class")
    p.add_argument("--unit", choices=["test", "household"], default="test")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_match)

    p = sub.add_parser("rank", help="Rank a suite of ISP pairs")
    p.add_argument("--suite", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--profiles")
    p.add_argument("--country", help="Country whose threshold --min-tests sets")
    p.add_argument("--min-tests", type=int, help="Test threshold when profiling without --profiles")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rank)

    p = sub.add_parser("synth", help="Generate a synthetic dataset with ground truth")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pipeline", help="Run every stage and write an artifact directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    load_dotenv()
    logging.basicConfig(level=env_log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", "absent") is None:
        args.seed = env_seed()

    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"stage failure [{e.stage}]: {e.cause}", file=sys.stderr)
        return EXIT_STAGE
    except InfeasibleSpecError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
