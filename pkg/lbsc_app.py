from __future__ import annotations

import os
import sys
import argparse
from typing import List, Optional

# Add current directory to path for imports
sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from dotenv import load_dotenv  # type: ignore

from lbsc.controllers import ControllerVariant
from lbsc.errors import LBSCError
from lbsc.harness import (
    EpisodeLog,
    export,
    headway_stats,
    load_log,
    mae,
    phase_table,
    run_batch,
    run_episode,
    timing_summary,
)
from utils.loader import list_log_files, load_scenario
from utils.logging_utils import append_run_summary, get_logger, refresh_levels
from utils.scenario import ScenarioConfig

logger = get_logger("lbsc.app")

EXIT_CLEAN = 0
EXIT_FAULT = 1
EXIT_VIOLATION = 2
CONTROLLER_CHOICES = [v.cli_name for v in ControllerVariant]


def output_path(out_dir: str, config: ScenarioConfig, fmt: str) -> str:
    return os.path.join(out_dir, f"{config.name}_{config.controller.cli_name}_seed{config.seed}.{fmt}")


def summarize(log: EpisodeLog, config: ScenarioConfig) -> str:
    stats = headway_stats(log, (config.b_st_m, config.b_go_m))
    maes = ", ".join(f"{label}={mae(log, (lo, hi), config.v_des_mps):.3f}" for label, lo, hi in config.phases())
    return (
        f"{config.name}/{config.controller.cli_name} seed={config.seed}: "
        f"headway [{stats.minimum:.2f}, {stats.maximum:.2f}] m, violations={stats.violations}, MAE {maes}"
    )


def cmd_run(args: argparse.Namespace) -> int:
    try:
        base = load_scenario(args.scenario).with_overrides(seed=args.seed)
    except LBSCError as e:
        logger.error(str(e))
        return EXIT_FAULT

    if args.batch:
        configs = [base.with_overrides(controller=v) for v in ControllerVariant]
    else:
        configs = [base.with_overrides(controller=ControllerVariant.parse(args.controller)) if args.controller else base]

    os.makedirs(args.out, exist_ok=True)
    try:
        if len(configs) > 1:
            logs = run_batch(configs, workers=args.workers)
        else:
            cfg = configs[0]
            logs = [run_episode(cfg, flush_path=output_path(args.out, cfg, args.format))]
    except LBSCError as e:
        logger.error(f"Run failed: {e}")
        append_run_summary(f"run fault: {e}")
        return EXIT_FAULT

    code = EXIT_CLEAN
    for cfg, log in zip(configs, logs):
        path = export(log, args.format, output_path(args.out, cfg, args.format), timing=args.timing)
        line = summarize(log, cfg)
        print(line)
        print(f"  -> {path}")
        if args.timing:
            t = timing_summary(log)
            print(f"  control {t['mean_control_ms']:.2f} ms mean, QP {t['mean_solve_ms']:.2f} ms mean")
        append_run_summary(line)
        if log.metadata.outcome == "violation":
            code = EXIT_VIOLATION
    return code


def cmd_compare(args: argparse.Namespace) -> int:
    files = list_log_files(args.logs)
    if not files:
        logger.error(f"No episode logs found in {args.logs}")
        return EXIT_FAULT
    try:
        scenario = load_scenario(args.scenario)
    except LBSCError as e:
        logger.error(str(e))
        return EXIT_FAULT

    logs = {os.path.basename(fp): load_log(fp) for fp in files}
    bounds = (scenario.b_st_m, scenario.b_go_m)
    table = phase_table(logs, scenario.phases(), bounds, scenario.v_des_mps)
    print(table.to_string(index=False, float_format=lambda x: f"{x:.3f}"))
    return EXIT_VIOLATION if (table["violations"] > 0).any() else EXIT_CLEAN


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Safety/stability QP control of a five-car CCC platoon")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one closed-loop episode (or all controllers with --batch)")
    run.add_argument("--scenario", default=None, help="Scenario YAML (default: data/ccc_scenario.yaml)")
    run.add_argument("--controller", default=None, choices=CONTROLLER_CHOICES)
    run.add_argument("--out", default="runs", help="Output directory for episode logs")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--format", default="csv", choices=["csv", "json"])
    run.add_argument("--batch", action="store_true", help="Run every controller in a process pool")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--timing", action="store_true", help="Write wall-clock solve times instead of zeros")
    run.set_defaults(func=cmd_run)

    compare = sub.add_parser("compare", help="Per-phase MAE and headway table over exported logs")
    compare.add_argument("--logs", required=True, help="Directory with csv/json episode logs")
    compare.add_argument("--scenario", default=None, help="Scenario supplying phases, bounds and v_des")
    compare.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    refresh_levels()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (LBSCError, OSError, ValueError) as e:
        logger.error(str(e))
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
