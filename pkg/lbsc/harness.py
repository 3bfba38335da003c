"""Closed-loop episodes, metrics and log export for the five-car CCC scenario."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from lbsc import __version__
from lbsc.controllers import ControlDiagnostics, ModelErrorLearner, SafetyStabilityController
from lbsc.errors import LBSCError, SimulationFault
from lbsc.platoon_plant import N_CARS, FleetState, PlatoonPlant, human_driver_control
from utils.logging_utils import get_logger
from utils.scenario import ScenarioConfig

logger = get_logger("lbsc.harness")

LOG_COLUMNS: Tuple[str, ...] = (
    ("t",)
    + tuple(f"p{i}" for i in range(1, N_CARS + 1))
    + tuple(f"v{i}" for i in range(1, N_CARS + 1))
    + tuple(f"a{i}" for i in range(1, N_CARS + 1))
    + tuple(f"u{i}" for i in range(1, N_CARS + 1))
    + ("eps", "eta", "mu_c3", "sigma_c3", "mu_c4", "sigma_c4", "h1", "h2", "V", "solve_ms")
)
EXTRA_COLUMNS: Tuple[str, ...] = ("d_c3", "d_c4", "status", "iterations", "kkt_residual", "control_ms")
DEFAULT_V_DES = 20.0
FLOAT_FORMAT = "%.9g"


@dataclass(frozen=True)
class StepRecord:
    state: FleetState
    u: np.ndarray
    diag: ControlDiagnostics
    d_c3: float = float("nan")
    d_c4: float = float("nan")

    def values(self, timing: bool = False) -> List[float]:
        s, d = self.state, self.diag
        return [
            s.t,
            *s.p.tolist(),
            *s.v.tolist(),
            *s.a.tolist(),
            *self.u.tolist(),
            d.eps,
            d.eta,
            d.mu_c3,
            d.sigma_c3,
            d.mu_c4,
            d.sigma_c4,
            d.h1,
            d.h2,
            d.V,
            d.solve_ms if timing else 0.0,
        ]


class EpisodeMetadata(BaseModel):
    scenario: str
    controller: str
    seed: int
    config_hash: str
    version: str = __version__
    dt_s: float
    rows: int = 0
    outcome: str = "clean"
    fault: Optional[str] = None


class EpisodeDocument(BaseModel):
    """JSON export layout."""

    metadata: EpisodeMetadata
    columns: List[str]
    rows: List[List[float]]


@dataclass
class EpisodeLog:
    rows: List[StepRecord]
    metadata: EpisodeMetadata

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self, timing: bool = False) -> pd.DataFrame:
        return pd.DataFrame([r.values(timing) for r in self.rows], columns=list(LOG_COLUMNS))

    def diagnostics_frame(self) -> pd.DataFrame:
        """Exported columns plus the in-memory extras (realized residuals, solver status, timing)."""
        frame = self.to_frame(timing=True)
        frame["d_c3"] = [r.d_c3 for r in self.rows]
        frame["d_c4"] = [r.d_c4 for r in self.rows]
        frame["status"] = [r.diag.status.value for r in self.rows]
        frame["iterations"] = [r.diag.iterations for r in self.rows]
        frame["kkt_residual"] = [r.diag.kkt_residual for r in self.rows]
        frame["control_ms"] = [r.diag.control_ms for r in self.rows]
        return frame


@dataclass(frozen=True)
class HeadwayStats:
    minimum: float
    maximum: float
    violations: int
    first_violation_t: Optional[float]


LogLike = Union[EpisodeLog, pd.DataFrame]


def _frame(log: LogLike) -> pd.DataFrame:
    return log.to_frame(timing=True) if isinstance(log, EpisodeLog) else log


def build_episode(config: ScenarioConfig) -> Tuple[PlatoonPlant, SafetyStabilityController]:
    nominal = config.nominal_car_params()
    nominal_driver = config.nominal_driver_params()
    controller_cfg = config.controller_config()
    learner = ModelErrorLearner(
        config.gp_settings(),
        nominal4=nominal,
        nominal_others=nominal,
        nominal_driver=nominal_driver,
        refit_period_steps=controller_cfg.gp_refit_period_steps,
        seed=config.seed,
    )
    controller = SafetyStabilityController(controller_cfg, nominal, nominal, nominal_driver, learner)
    plant = PlatoonPlant(
        [config.true_car_params()] * N_CARS,
        config.disturbance_schedule(),
        config.lead_profile(),
        lead_gain=config.lead_gain_per_s,
        substeps=config.physics_substeps,
    )
    return plant, controller


def run_episode(config: ScenarioConfig, flush_path: Optional[str] = None) -> EpisodeLog:
    """Full closed-loop rollout; on a fault the partial log is flushed to ``flush_path``."""
    plant, controller = build_episode(config)
    learner = controller.learner
    driver = config.driver_params()
    true_car = config.true_car_params()
    dt = config.dt
    learns = config.controller.learns

    metadata = EpisodeMetadata(
        scenario=config.name,
        controller=config.controller.cli_name,
        seed=config.seed,
        config_hash=config.config_hash(),
        dt_s=dt,
    )
    log = EpisodeLog(rows=[], metadata=metadata)
    logger.info(f"Episode start: {config.name} / {metadata.controller}, {config.steps} steps at {config.control_rate_hz:g} Hz")

    state = config.initial_state()
    b_st, b_go = config.b_st_m, config.b_go_m
    warned = False
    try:
        for k in range(config.steps):
            u4, diag = controller.control(state)
            if not math.isfinite(u4):
                raise SimulationFault("non-finite control for car 4", state.as_dump())
            controls = np.zeros(N_CARS)
            controls[3] = u4
            for i in (2, 3, 5):
                controls[i - 1] = human_driver_control(i, state, driver, true_car)
            applied = plant.applied_controls(state, controls)
            nxt = plant.step(state, controls, dt)
            nxt = replace(nxt, t=(k + 1) / config.control_rate_hz)

            if learns:
                realized = learner.observe(state, nxt, applied[3], dt)
            else:
                realized = learner.residuals(state, nxt, applied[3], dt)
            log.rows.append(StepRecord(state=state, u=applied, diag=diag, d_c3=realized["c3"], d_c4=realized["c4"]))

            gap = state.headway(4)
            if not warned and not b_st <= gap <= b_go:
                logger.warning(f"Headway {gap:.2f} m outside [{b_st:g}, {b_go:g}] at t={state.t:.2f}")
                warned = True
            state = nxt
    except (LBSCError, ArithmeticError, np.linalg.LinAlgError) as e:
        metadata.outcome, metadata.fault, metadata.rows = "fault", str(e), len(log.rows)
        logger.error(f"Episode aborted after {len(log.rows)} steps: {e}")
        if flush_path:
            export(log, "json" if flush_path.endswith(".json") else "csv", flush_path)
        raise

    metadata.rows = len(log.rows)
    if headway_stats(log, (b_st, b_go)).violations:
        metadata.outcome = "violation"
    logger.info(f"Episode end: {metadata.rows} rows, outcome {metadata.outcome}")
    return log


def run_batch(configs: Sequence[ScenarioConfig], workers: Optional[int] = None) -> List[EpisodeLog]:
    """Independent episodes in a process pool; results keep the order of ``configs``."""
    if len(configs) <= 1 or workers == 1:
        return [run_episode(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers or min(len(configs), os.cpu_count() or 1)) as pool:
        return list(pool.map(run_episode, configs))


def _phase_mask(frame: pd.DataFrame, phase: Tuple[float, float]) -> pd.Series:
    lo, hi = phase
    return (frame["t"] >= lo) & (frame["t"] < hi)


def mae(log: LogLike, phase: Tuple[float, float], v_des: float = DEFAULT_V_DES) -> float:
    """Mean |v4 - v_des| over the samples with t in [start, end)."""
    frame = _frame(log)
    sel = frame.loc[_phase_mask(frame, phase), "v4"]
    if sel.empty:
        raise ValueError(f"phase {phase} contains no samples")
    return float(np.mean(np.abs(sel.to_numpy() - v_des)))


def headway_stats(log: LogLike, bounds: Tuple[float, float]) -> HeadwayStats:
    frame = _frame(log)
    gap = (frame["p3"] - frame["p4"]).to_numpy()
    lo, hi = bounds
    bad = (gap < lo) | (gap > hi)
    first = float(frame["t"].to_numpy()[bad][0]) if bad.any() else None
    return HeadwayStats(
        minimum=float(gap.min()),
        maximum=float(gap.max()),
        violations=int(bad.sum()),
        first_violation_t=first,
    )


def coverage(log: EpisodeLog, c_delta: float = 3.0) -> Dict[str, float]:
    """Fraction of realized residuals inside [mu - c sigma, mu + c sigma] predicted at the same step."""
    frame = log.diagnostics_frame()
    out: Dict[str, float] = {}
    hits = []
    for ch in ("c3", "c4"):
        d = frame[f"d_{ch}"].to_numpy()
        mu = frame[f"mu_{ch}"].to_numpy()
        sigma = frame[f"sigma_{ch}"].to_numpy()
        ok = np.abs(d - mu) <= c_delta * sigma
        out[ch] = float(ok.mean())
        hits.append(ok)
    out["all"] = float(np.concatenate(hits).mean())
    return out


def timing_summary(log: EpisodeLog) -> Dict[str, float]:
    frame = log.diagnostics_frame()
    control, solve = frame["control_ms"].to_numpy(), frame["solve_ms"].to_numpy()
    return {
        "mean_control_ms": float(control.mean()),
        "p95_control_ms": float(np.percentile(control, 95)),
        "max_control_ms": float(control.max()),
        "mean_solve_ms": float(solve.mean()),
    }


def _round9(x: float) -> float:
    return float(FLOAT_FORMAT % x)


def export(log: EpisodeLog, fmt: str, path: str, timing: bool = False) -> str:
    """Write the log as csv or json; I/O errors name the target path."""
    frame = log.to_frame(timing=timing)
    try:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        if fmt == "csv":
            frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        elif fmt == "json":
            doc = EpisodeDocument(
                metadata=log.metadata,
                columns=list(LOG_COLUMNS),
                rows=[[_round9(x) for x in row] for row in frame.itertuples(index=False, name=None)],
            )
            with open(path, "w", encoding="utf-8") as f:
                f.write(doc.model_dump_json())
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    except OSError as e:
        raise OSError(f"could not write episode log to {path}: {e}") from e
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def load_log(path: str) -> pd.DataFrame:
    if path.endswith(".json"):
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = EpisodeDocument.model_validate_json(f.read())
        except ValidationError as e:
            raise ValueError(f"{path} is not an episode document: {e}") from e
        return pd.DataFrame(doc.rows, columns=doc.columns)
    frame = pd.read_csv(path)
    missing = [c for c in LOG_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path} is missing columns {missing}")
    return frame


def phase_table(
    logs: Mapping[str, LogLike],
    phases: Iterable[Tuple[str, float, float]],
    bounds: Tuple[float, float],
    v_des: float = DEFAULT_V_DES,
) -> pd.DataFrame:
    """One row per log: per-phase MAE plus headway min/max/violations."""
    phases = list(phases)
    records = []
    for name, log in logs.items():
        rec: Dict[str, object] = {"log": name}
        for label, lo, hi in phases:
            rec[f"mae_{label}"] = mae(log, (lo, hi), v_des)
        stats = headway_stats(log, bounds)
        rec.update(
            headway_min=stats.minimum,
            headway_max=stats.maximum,
            violations=stats.violations,
            first_violation_t=stats.first_violation_t,
        )
        records.append(rec)
    return pd.DataFrame(records)
