"""
``feeder-mg`` command line.

Exit codes: 0 success, 1 other library error, 2 configuration or scenario
error, 3 infeasible model, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import structlog

from feeder_microgrid import __version__
from feeder_microgrid.exceptions import (
    FeederMicrogridError,
    InfeasibleModelError,
    ReportError,
    ScenarioError,
)
from feeder_microgrid.harness.metrics import Metrics, compute_metrics
from feeder_microgrid.harness.report import export_comparison, export_report
from feeder_microgrid.harness.runner import BUILTIN_CASES, resolve_case, run_restoration
from feeder_microgrid.harness.synthetic import (
    generate_synthetic_scenario,
    load_replica,
    parse_shape,
    write_scenario,
)
from feeder_microgrid.logging_setup import configure_logging
from feeder_microgrid.quality import ERROR, FAIL, run_quality_checks
from feeder_microgrid.scenario import Scenario, load_scenario
from feeder_microgrid.settings import RuntimeSettings
from feeder_microgrid.stage1 import Stage1Instance, build_stage1, schedule_frame, solve_stage1

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feeder-mg",
        description="Feeder microgrid energy management and restoration simulator.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--log-format", choices=["console", "json"], default=None)
    parser.add_argument("--env-file", default=None, help="dotenv file with FMG_* overrides")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scenario", type=Path, default=None,
                       help="scenario config (YAML/JSON); a synthetic replica when omitted")
        p.add_argument("--seed", type=int, default=0, help="seed for the synthetic replica")
        p.add_argument("--horizon-days", type=float, default=None,
                       help="truncate the restoration window")
        p.add_argument("--backend", choices=["highs", "bnb"], default=None)

    run = sub.add_parser("run", help="run one case through the closed loop")
    scenario_args(run)
    run.add_argument("--case", default="case3", help=f"one of {sorted(BUILTIN_CASES)}")
    run.add_argument("--out", type=Path, required=True)

    compare = sub.add_parser("compare", help="run the case matrix and tabulate metrics")
    scenario_args(compare)
    compare.add_argument("--case", action="append", dest="cases", default=None,
                         help="repeatable; defaults to every built-in case")
    compare.add_argument("--out", type=Path, required=True)

    gen = sub.add_parser("gen", help="write a synthetic scenario")
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--name", default="scenario")
    gen.add_argument("--horizon-days", type=float, default=None, dest="days")
    gen.add_argument("--pv-bias", type=float, default=None)
    gen.add_argument("--load-bias-kw", type=float, default=None)
    gen.add_argument("--load-noise", type=float, default=None)
    gen.add_argument("--spikes-per-day", type=float, default=None)
    gen.add_argument("--spike-depth", type=float, default=None)
    gen.add_argument("--start-day-offset", type=int, default=None)

    validate = sub.add_parser("validate", help="lint a scenario")
    validate.add_argument("--scenario", type=Path, required=True)

    solve = sub.add_parser("solve", help="solve one stage-1 window for debugging")
    scenario_args(solve)
    solve.add_argument("--case", default=None, help="apply a case's policy first")
    solve.add_argument("--slot", type=int, default=0)
    solve.add_argument("--lp-dump", type=Path, default=None, help="write the model as CPLEX LP")
    solve.add_argument("--out", type=Path, default=None, help="write the schedule CSV here")
    return parser


def _configure_logging(args: argparse.Namespace, settings: RuntimeSettings,
                       scenario: Optional[Scenario] = None) -> None:
    # command line over environment over scenario file
    level, fmt = "INFO", "console"
    if scenario is not None:
        level, fmt = scenario.logging.level, scenario.logging.format
    level = args.log_level or settings.log_level or level
    fmt = args.log_format or settings.log_format or fmt
    configure_logging(level, fmt)


def _scenario(args: argparse.Namespace, settings: RuntimeSettings) -> Scenario:
    if args.scenario is not None:
        scenario = load_scenario(args.scenario)
    else:
        scenario = generate_synthetic_scenario(seed=args.seed)
    backend = args.backend or settings.solver_backend
    if backend:
        scenario = scenario.with_overrides(
            solver=scenario.solver.model_copy(update={"backend": backend})
        )
    if args.horizon_days is not None:
        scenario = scenario.with_overrides(horizon_days=args.horizon_days)
    _configure_logging(args, settings, scenario)
    return scenario


def cmd_run(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    scenario = _scenario(args, settings)
    case = resolve_case(args.case)
    log = run_restoration(scenario, case, checkpoint_dir=args.out / case.name)
    metrics = compute_metrics(log, scenario)
    export_report(log, metrics, args.out)
    export_comparison({case.name: metrics}, args.out)
    print(json.dumps({"case": case.name, **metrics.model_dump()}, indent=2))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    scenario = _scenario(args, settings)
    names: List[str] = args.cases or list(BUILTIN_CASES)
    cases = [resolve_case(n) for n in names]
    results: Dict[str, Metrics] = {}
    for case in cases:
        log = run_restoration(scenario, case, checkpoint_dir=args.out / case.name)
        results[case.name] = compute_metrics(log, scenario)
        export_report(log, results[case.name], args.out)
    export_comparison(results, args.out)
    print((args.out / "comparison.md").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_gen(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    _configure_logging(args, settings)
    _, shape = load_replica()
    updates = {
        key: value for key, value in {
            "days": args.days,
            "pv_bias": args.pv_bias,
            "load_bias_kw": args.load_bias_kw,
            "load_noise": args.load_noise,
            "spikes_per_day": args.spikes_per_day,
            "spike_depth": args.spike_depth,
            "start_day_offset": args.start_day_offset,
        }.items() if value is not None
    }
    shape = parse_shape({**shape.model_dump(), **updates})
    scenario = generate_synthetic_scenario(shape, seed=args.seed)
    path = write_scenario(scenario, args.out, args.name)
    print(path)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    _configure_logging(args, settings)
    scenario = load_scenario(args.scenario)
    results = run_quality_checks(scenario)
    for r in results:
        print(f"{r['status']:5s} {r['check']}: {r['message']}")
    return EXIT_CONFIG if any(r["status"] in (FAIL, ERROR) for r in results) else EXIT_OK


def cmd_solve(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    scenario = _scenario(args, settings)
    if args.case:
        case = resolve_case(args.case)
        scenario = scenario.with_overrides(policy=case.apply(scenario.policy))
    instance = Stage1Instance.from_scenario(scenario, args.slot)
    if args.lp_dump is not None:
        try:
            build_stage1(scenario, instance).write_lp(args.lp_dump)
        except OSError as exc:
            raise ReportError(f"could not write {args.lp_dump}: {exc}") from exc
        logger.info("lp_written", path=str(args.lp_dump))
    schedule = solve_stage1(scenario, instance)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        schedule_frame(scenario, schedule).to_csv(
            args.out / "schedule.csv", index=False, float_format="%.6f", lineterminator="\n"
        )
    summary = {
        "slot": args.slot,
        "window": schedule.length,
        "status": schedule.status.value,
        "objective": schedule.objective,
        "nodes": schedule.nodes,
        "final_fuel": [float(v) for v in schedule.fuel[-1]] if schedule.length else [],
        "residuals": schedule.residuals,
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "gen": cmd_gen,
    "validate": cmd_validate,
    "solve": cmd_solve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = RuntimeSettings.from_env(args.env_file)
        return COMMANDS[args.command](args, settings)
    except ScenarioError as exc:
        logger.error("scenario_error", code=exc.code, key=exc.key, error=str(exc))
        return EXIT_CONFIG
    except InfeasibleModelError as exc:
        logger.error("infeasible_model", error=str(exc), diagnosis=exc.diagnosis)
        return EXIT_INFEASIBLE
    except (ReportError, OSError) as exc:
        logger.error("io_error", error=str(exc))
        return EXIT_IO
    except ValueError as exc:
        logger.error("invalid_argument", error=str(exc))
        return EXIT_CONFIG
    except FeederMicrogridError as exc:
        logger.error("run_failed", error=str(exc))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
