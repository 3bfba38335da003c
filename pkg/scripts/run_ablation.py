from __future__ import annotations

import os
import sys
import argparse
from typing import Dict, List

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dotenv import load_dotenv  # type: ignore

from lbsc.controllers import ControllerVariant
from lbsc.harness import EpisodeLog, headway_stats, mae, phase_table, run_batch, timing_summary
from utils.loader import load_scenario
from utils.logging_utils import append_run_summary, get_logger

logger = get_logger("lbsc.ablation")

# lead braking rates tried in turn until LBSC-N breaks the headway bounds while LBSC does not
BRAKE_LADDER = (-2.5, -3.0, -3.5, -4.0)


def run_all(scenario_path: str | None, brake_rate: float, workers: int | None) -> Dict[ControllerVariant, EpisodeLog]:
    base = load_scenario(scenario_path).with_overrides(lead_brake_rate_mps2=brake_rate)
    variants: List[ControllerVariant] = list(ControllerVariant)
    logs = run_batch([base.with_overrides(controller=v) for v in variants], workers=workers)
    return dict(zip(variants, logs))


def main():
    load_dotenv()

    parser = argparse.ArgumentParser(description="LBSC vs LBSC-N vs CBF-CLF-QP on the CCC scenario")
    parser.add_argument("--scenario", default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--no-escalate", action="store_true", help="Only run the scenario's own brake rate")
    args = parser.parse_args()

    scenario = load_scenario(args.scenario)
    bounds = (scenario.b_st_m, scenario.b_go_m)
    ladder = (scenario.lead_brake_rate_mps2,) if args.no_escalate else BRAKE_LADDER

    for rate in ladder:
        logs = run_all(args.scenario, rate, args.workers)
        table = phase_table({v.cli_name: log for v, log in logs.items()}, scenario.phases(), bounds, scenario.v_des_mps)
        print(f"\nlead brake rate {rate:g} m/s^2")
        print(table.to_string(index=False, float_format=lambda x: f"{x:.3f}"))

        for v, log in logs.items():
            t = timing_summary(log)
            print(f"  {v.cli_name:>11}: control {t['mean_control_ms']:.2f} ms mean (p95 {t['p95_control_ms']:.2f}), QP {t['mean_solve_ms']:.2f} ms mean")

        lbsc_bad = headway_stats(logs[ControllerVariant.LBSC], bounds).violations
        n_bad = headway_stats(logs[ControllerVariant.LBSC_N], bounds).violations
        phase1 = scenario.phases()[0]
        append_run_summary(
            f"ablation brake={rate:g}: violations lbsc={lbsc_bad} lbsc-n={n_bad}, "
            f"phase1 MAE lbsc={mae(logs[ControllerVariant.LBSC], phase1[1:], scenario.v_des_mps):.3f}"
        )
        if lbsc_bad:
            logger.error(f"LBSC left the headway bounds {lbsc_bad} times at brake rate {rate:g}")
        if lbsc_bad == 0 and n_bad > 0:
            logger.info(f"Separation reached at brake rate {rate:g}")
            return
    logger.warning("LBSC-N never violated the headway bounds on the brake ladder")


if __name__ == "__main__":
    main()
