"""Per-step QP assembly for the autonomous car 4: LBSC, LBSC-N and the CBF-CLF-QP baseline.

Car 4 reasons over x = [p3, v3, p4, v4] with its nominal model of itself and of the human
driver in front of it. Learned residuals of car 3 and car 4 accelerations enter the rows
through the posterior moments of two scalar GPs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from lbsc.constraint_builder import (
    BarrierSpec,
    LyapunovSpec,
    safety_row,
    satisfies_esclf,
    satisfies_zcbf,
    stability_row,
)
from lbsc.errors import FittingError
from lbsc.gp_regression import (
    DEFAULT_CAPACITY,
    DEFAULT_LENGTH_SCALE,
    DEFAULT_NOISE_VARIANCE,
    DEFAULT_SIGNAL_VARIANCE,
    GPModel,
    HyperBounds,
    KernelHyper,
    ObservationWindow,
    PosteriorMoment,
    confidence_interval,
    fit,
    optimize_hyperparameters,
    predict,
)
from lbsc.platoon_plant import FleetState, DriverParams, driver_force, driver_force_partials
from lbsc.qp_solver import QProblem, QPSolution, SolveStatus, solve
from lbsc.vehicle_dynamics import AffineModel, CarParams, ScalarField, longitudinal_accel, residual_observation
from utils.logging_utils import get_logger

logger = get_logger("lbsc.controller")

# indices into the car-4 reasoning state
P3, V3, P4, V4 = 0, 1, 2, 3
STATE_DIM = 4
CHANNELS = ("c3", "c4")
_CHANNEL_STATE_INDEX = {"c3": V3, "c4": V4}
_CHANNEL_CAR_INDEX = {"c3": 2, "c4": 3}


class ControllerVariant(str, Enum):
    LBSC = "lbsc"
    LBSC_N = "lbsc_n"
    CBF_CLF_QP = "cbf_clf_qp"

    @classmethod
    def parse(cls, name: str) -> "ControllerVariant":
        return cls(name.strip().lower().replace("-", "_"))

    @property
    def cli_name(self) -> str:
        return self.value.replace("_", "-")

    @property
    def learns(self) -> bool:
        return self is not ControllerVariant.CBF_CLF_QP


class ControllerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    variant: ControllerVariant = ControllerVariant.LBSC
    c_delta: float = Field(3.0, ge=0.0)
    k_eps: float = Field(1.0e30, gt=0.0)
    k_eta: float = Field(1.0e20, gt=0.0)
    clf_rate: float = Field(0.6, gt=0.0)
    barrier_alpha: float = Field(5.0, gt=0.0)
    barrier_lambda: float = Field(1.0, gt=0.0)
    v_des: float = 20.0
    headway_min_m: float = 25.0
    headway_max_m: float = 100.0
    gp_refit_period_steps: int = Field(50, ge=1)
    qp_max_iter: int = Field(100, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _equal_weights_for_lbsc_n(cls, data):
        if isinstance(data, dict):
            variant = data.get("variant", ControllerVariant.LBSC)
            if isinstance(variant, str):
                variant = ControllerVariant.parse(variant)
            if variant is ControllerVariant.LBSC_N:
                data = {**data, "variant": variant, "k_eta": data.get("k_eps", 1.0e30)}
        return data

    @model_validator(mode="after")
    def _check(self) -> "ControllerConfig":
        if self.k_eps < self.k_eta:
            raise ValueError(f"k_eps ({self.k_eps}) must not be smaller than k_eta ({self.k_eta})")
        if not 0.0 < self.headway_min_m < self.headway_max_m:
            raise ValueError("need 0 < headway_min_m < headway_max_m")
        return self


class LearnerConfig(BaseModel):
    """Sliding-window GP settings shared by both learned channels."""

    model_config = ConfigDict(frozen=True)

    window_size: int = Field(DEFAULT_CAPACITY, ge=1)
    noise_variance: float = Field(DEFAULT_NOISE_VARIANCE, ge=0.0)
    signal_variance: float = Field(DEFAULT_SIGNAL_VARIANCE, gt=0.0)
    length_scale: float = Field(DEFAULT_LENGTH_SCALE, gt=0.0)
    optimize: bool = True
    # noise variance joins the likelihood fit, never below noise_variance
    optimize_noise: bool = True
    # a residual outside the c_delta band triggers an immediate refit of its channel
    refit_on_miss: bool = True
    miss_c_delta: float = Field(3.0, ge=0.0)
    # moments describe the next realized residual (latent variance + noise variance)
    observation_interval: bool = True
    time_feature: bool = False
    residual_noise_std: float = Field(0.0, ge=0.0)
    bounds: HyperBounds = Field(default_factory=HyperBounds)

    @property
    def feature_dim(self) -> int:
        return 2 if self.time_feature else 1

    def initial_hyper(self) -> KernelHyper:
        return KernelHyper(signal_variance=self.signal_variance, length_scales=(self.length_scale,) * self.feature_dim)

    def fit_bounds(self) -> HyperBounds:
        lo, hi = self.bounds.noise_variance
        floor = min(max(lo, self.noise_variance), hi)
        return self.bounds.model_copy(update={"noise_variance": (floor, hi)})


def nominal_car3_accel(state: FleetState, driver: DriverParams, car: CarParams) -> float:
    """Car 3 acceleration as car 4's nominal model predicts it from the shared state."""
    u3 = driver_force(state.p[1], state.v[1], state.p[2], state.v[2], driver, car)
    return longitudinal_accel(state.v[2], u3, car)


class ModelErrorLearner:
    """Owns the car-3 and car-4 residual windows and their current GP posteriors."""

    def __init__(
        self,
        settings: LearnerConfig,
        nominal4: CarParams,
        nominal_others: CarParams,
        nominal_driver: DriverParams,
        refit_period_steps: int = 50,
        seed: Optional[int] = None,
    ):
        self.settings = settings
        self.nominal4 = nominal4
        self.nominal_others = nominal_others
        self.nominal_driver = nominal_driver
        self.refit_period_steps = refit_period_steps
        self._rng = np.random.default_rng(seed)
        self.windows: Dict[str, ObservationWindow] = {
            ch: ObservationWindow(settings.window_size, settings.noise_variance) for ch in CHANNELS
        }
        self.hypers: Dict[str, KernelHyper] = {ch: settings.initial_hyper() for ch in CHANNELS}
        self._models: Dict[str, GPModel] = {ch: fit(self.windows[ch], self.hypers[ch]) for ch in CHANNELS}
        self.steps = 0

    @property
    def models(self) -> Dict[str, GPModel]:
        return dict(self._models)

    def features(self, state: FleetState, channel: str) -> np.ndarray:
        v = float(state.v[_CHANNEL_CAR_INDEX[channel]])
        if self.settings.time_feature:
            return np.array([v, state.t])
        return np.array([v])

    def residuals(self, prev: FleetState, now: FleetState, u4: float, dt: float) -> Dict[str, float]:
        """Realized acceleration minus nominal prediction over [prev.t, now.t] for both channels."""
        c4 = residual_observation(prev.v[3], now.v[3], dt, u4, self.nominal4)
        c3 = (now.v[2] - prev.v[2]) / dt - nominal_car3_accel(prev, self.nominal_driver, self.nominal_others)
        return {"c3": float(c3), "c4": float(c4)}

    def observe(self, prev: FleetState, now: FleetState, u4: float, dt: float) -> Dict[str, float]:
        """Push the newest residuals, refit both posteriors and return the noise-free residuals."""
        realized = self.residuals(prev, now, u4, dt)
        settings = self.settings
        noise_std = settings.residual_noise_std
        missed = set()
        for ch in CHANNELS:
            target = realized[ch] + (self._rng.normal(0.0, noise_std) if noise_std > 0.0 else 0.0)
            band = confidence_interval(self._moment(ch, prev), settings.miss_c_delta)
            if not band.contains(target):
                missed.add(ch)
            self.windows[ch].push(self.features(prev, ch), target)
        self.steps += 1

        periodic = self.steps % self.refit_period_steps == 0
        for ch in CHANNELS:
            if settings.optimize and (periodic or (settings.refit_on_miss and ch in missed)):
                self._reoptimize(ch, now.t)
            try:
                self._models[ch] = fit(self.windows[ch], self.hypers[ch])
            except FittingError as e:
                logger.warning(f"{ch}: refit failed, keeping previous posterior: {e}")
        return realized

    def _reoptimize(self, ch: str, t: float) -> None:
        window = self.windows[ch]
        found = optimize_hyperparameters(
            window,
            self.settings.fit_bounds(),
            self.hypers[ch],
            optimize_noise=self.settings.optimize_noise,
        )
        if not found.converged:
            logger.warning(f"{ch}: hyperparameters kept best-so-far at t={t:.2f}")
        self.hypers[ch] = found.hyper
        if found.noise_variance is not None:
            window.noise_variance = found.noise_variance

    def _moment(self, ch: str, state: FleetState, models: Optional[Mapping[str, GPModel]] = None) -> PosteriorMoment:
        model = (models or self._models)[ch]
        return predict(model, self.features(state, ch), observation=self.settings.observation_interval)

    def predict(self, state: FleetState, models: Optional[Mapping[str, GPModel]] = None) -> Dict[str, PosteriorMoment]:
        return {ch: self._moment(ch, state, models) for ch in CHANNELS}


def headway_lower_barrier(b_st: float) -> ScalarField:
    grad = np.array([1.0, 0.0, -1.0, 0.0])
    return ScalarField(
        value=lambda x: float(x[P3] - x[P4] - b_st),
        gradient=lambda x: grad.copy(),
        hessian=lambda x: np.zeros((STATE_DIM, STATE_DIM)),
        name="h1",
    )


def headway_upper_barrier(b_go: float) -> ScalarField:
    grad = np.array([-1.0, 0.0, 1.0, 0.0])
    return ScalarField(
        value=lambda x: float(b_go - (x[P3] - x[P4])),
        gradient=lambda x: grad.copy(),
        hessian=lambda x: np.zeros((STATE_DIM, STATE_DIM)),
        name="h2",
    )


def velocity_lyapunov(v_des: float) -> ScalarField:
    hess = np.zeros((STATE_DIM, STATE_DIM))
    hess[V4, V4] = 1.0

    def gradient(x: np.ndarray) -> np.ndarray:
        g = np.zeros(STATE_DIM)
        g[V4] = x[V4] - v_des
        return g

    return ScalarField(
        value=lambda x: float(0.5 * (x[V4] - v_des) ** 2),
        gradient=gradient,
        hessian=lambda x: hess.copy(),
        name="V",
    )


def reduced_state(state: FleetState) -> np.ndarray:
    return np.array([state.p[2], state.v[2], state.p[3], state.v[3]])


def ccc_affine_model(
    state: FleetState,
    nominal4: CarParams,
    nominal_others: CarParams,
    nominal_driver: DriverParams,
) -> AffineModel:
    """Nominal [p3, v3, p4, v4] dynamics; car 2's position and speed are read from ``state``."""
    p2, v2 = float(state.p[1]), float(state.v[1])
    m3, m4 = nominal_others.mass, nominal4.mass

    def drift(x: np.ndarray) -> np.ndarray:
        u3 = driver_force(p2, v2, x[P3], x[V3], nominal_driver, nominal_others)
        return np.array(
            [
                x[V3],
                longitudinal_accel(x[V3], u3, nominal_others),
                x[V4],
                -nominal4.resistance(x[V4]) / m4,
            ]
        )

    def input_map(x: np.ndarray) -> np.ndarray:
        return np.array([[0.0], [0.0], [0.0], [1.0 / m4]])

    def drift_jacobian(x: np.ndarray) -> np.ndarray:
        du_dp, du_dv = driver_force_partials(p2, v2, x[P3], x[V3], nominal_driver, nominal_others)
        J = np.zeros((STATE_DIM, STATE_DIM))
        J[P3, V3] = 1.0
        J[V3, P3] = du_dp / m3
        J[V3, V3] = (du_dv - nominal_others.f1 - 2.0 * nominal_others.f2 * x[V3]) / m3
        J[P4, V4] = 1.0
        J[V4, V4] = -(nominal4.f1 + 2.0 * nominal4.f2 * x[V4]) / m4
        return J

    return AffineModel(n=STATE_DIM, m=1, drift=drift, input_map=input_map, drift_jacobian=drift_jacobian)


@dataclass(frozen=True)
class ControlDiagnostics:
    u: float
    eps: float
    eta: float
    mu_c3: float
    sigma_c3: float
    mu_c4: float
    sigma_c4: float
    h1: float
    h2: float
    V: float
    row_values: Tuple[float, ...] = ()
    status: SolveStatus = SolveStatus.OPTIMAL
    iterations: int = 0
    kkt_residual: float = 0.0
    solve_ms: float = 0.0
    control_ms: float = 0.0
    moments: Dict[str, PosteriorMoment] = field(default_factory=dict)


class SafetyStabilityController:
    """Builds and solves the slacked safety/stability QP for car 4."""

    def __init__(
        self,
        config: ControllerConfig,
        nominal4: Optional[CarParams] = None,
        nominal_others: Optional[CarParams] = None,
        nominal_driver: Optional[DriverParams] = None,
        learner: Optional[ModelErrorLearner] = None,
    ):
        self.config = config
        self.nominal4 = nominal4 or CarParams.crude_nominal()
        self.nominal_others = nominal_others or CarParams.crude_nominal()
        self.nominal_driver = nominal_driver or DriverParams(k_b=20.0, k_p=1000.0)
        self.learner = learner
        self.lower = BarrierSpec(headway_lower_barrier(config.headway_min_m), config.barrier_lambda, config.barrier_alpha)
        self.upper = BarrierSpec(headway_upper_barrier(config.headway_max_m), config.barrier_lambda, config.barrier_alpha)
        self.tracking = LyapunovSpec(velocity_lyapunov(config.v_des), config.clf_rate)

    def model(self, state: FleetState) -> AffineModel:
        return ccc_affine_model(state, self.nominal4, self.nominal_others, self.nominal_driver)

    def build_problem(
        self,
        state: FleetState,
        moments: Optional[Mapping[str, PosteriorMoment]] = None,
        k_eps: Optional[float] = None,
        k_eta: Optional[float] = None,
    ) -> QProblem:
        model = self.model(state)
        x = reduced_state(state)
        by_index = {_CHANNEL_STATE_INDEX[ch]: m for ch, m in (moments or {}).items()}
        c = self.config.c_delta
        rows = (
            safety_row(self.lower, model, x, by_index, c, label="headway_min"),
            safety_row(self.upper, model, x, by_index, c, label="headway_max"),
            stability_row(self.tracking, model, x, by_index, c, label="velocity"),
        )
        M = self.nominal4.mass
        return QProblem(
            H=np.array([[1.0 / (M * M)]]),
            k_eps=self.config.k_eps if k_eps is None else k_eps,
            k_eta=self.config.k_eta if k_eta is None else k_eta,
            rows=rows,
            u_min=np.array([self.nominal4.u_min]),
            u_max=np.array([self.nominal4.u_max]),
            u_ref=np.array([self.nominal4.resistance(float(state.v[3]))]),
        )

    def control_with_moments(
        self,
        state: FleetState,
        moments: Optional[Mapping[str, PosteriorMoment]] = None,
        k_eps: Optional[float] = None,
        k_eta: Optional[float] = None,
    ) -> Tuple[float, ControlDiagnostics]:
        started = time.perf_counter()
        problem = self.build_problem(state, moments, k_eps, k_eta)
        sol: QPSolution = solve(problem, max_iter=self.config.qp_max_iter)
        u = float(sol.u_star[0])
        x = reduced_state(state)
        moments = dict(moments or {})
        zero = PosteriorMoment(0.0, 0.0)
        m3, m4 = moments.get("c3", zero), moments.get("c4", zero)
        if sol.eps > 0.0:
            logger.debug(f"t={state.t:.2f} safety slack {sol.eps:.3e}")
        diag = ControlDiagnostics(
            u=u,
            eps=sol.eps,
            eta=sol.eta,
            mu_c3=m3.mean,
            sigma_c3=m3.std,
            mu_c4=m4.mean,
            sigma_c4=m4.std,
            h1=self.lower.field(x),
            h2=self.upper.field(x),
            V=self.tracking.field(x),
            row_values=tuple(row.value(sol.u_star) for row in problem.rows),
            status=sol.status,
            iterations=sol.iterations,
            kkt_residual=sol.kkt_residual,
            solve_ms=sol.solve_ms,
            control_ms=(time.perf_counter() - started) * 1e3,
            moments=moments,
        )
        return u, diag

    def _moments_from(self, state: FleetState, gp_models: Optional[Mapping[str, GPModel]]) -> Dict[str, PosteriorMoment]:
        if self.learner is None:
            raise ValueError("a learning controller needs a ModelErrorLearner")
        return self.learner.predict(state, gp_models)

    def lbsc_control(
        self, state: FleetState, gp_models: Optional[Mapping[str, GPModel]] = None
    ) -> Tuple[float, ControlDiagnostics]:
        return self.control_with_moments(state, self._moments_from(state, gp_models))

    def lbsc_n_control(
        self, state: FleetState, gp_models: Optional[Mapping[str, GPModel]] = None
    ) -> Tuple[float, ControlDiagnostics]:
        k = self.config.k_eps
        return self.control_with_moments(state, self._moments_from(state, gp_models), k_eps=k, k_eta=k)

    def cbf_clf_qp_control(self, state: FleetState) -> Tuple[float, ControlDiagnostics]:
        return self.control_with_moments(state, None)

    def control(self, state: FleetState) -> Tuple[float, ControlDiagnostics]:
        variant = self.config.variant
        if variant is ControllerVariant.LBSC:
            return self.lbsc_control(state)
        if variant is ControllerVariant.LBSC_N:
            return self.lbsc_n_control(state)
        return self.cbf_clf_qp_control(state)

    def check_membership(self, state: FleetState, u: float, d: Optional[np.ndarray] = None) -> Dict[str, float]:
        """ZCBF / ES-CLF margins of ``u`` at ``state`` under model error ``d`` (4-vector)."""
        model = self.model(state)
        x = reduced_state(state)
        uu = np.array([u])
        return {
            "headway_min": satisfies_zcbf(self.lower, model, x, uu, d).margin,
            "headway_max": satisfies_zcbf(self.upper, model, x, uu, d).margin,
            "velocity": satisfies_esclf(self.tracking, model, x, uu, d).margin,
        }
