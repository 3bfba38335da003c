from __future__ import annotations

import hashlib
from typing import List, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from lbsc.controllers import ControllerConfig, ControllerVariant, LearnerConfig
from lbsc.gp_regression import HyperBounds
from lbsc.platoon_plant import N_CARS, DisturbanceSchedule, DriverParams, FleetState, LeadProfile
from lbsc.vehicle_dynamics import CarParams


class ScenarioConfig(BaseModel):
    """Flat scenario file: one key per setting, units in the key name."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "ccc"
    controller: ControllerVariant = ControllerVariant.LBSC
    seed: int = 0
    episode_length_s: float = Field(100.0, gt=0.0)
    control_rate_hz: float = Field(50.0, gt=0.0)
    phase_boundaries_s: List[float] = Field(default_factory=lambda: [0.0, 20.0, 70.0, 100.0])
    initial_positions_m: List[float] = Field(default_factory=lambda: [240.0, 180.0, 120.0, 60.0, 0.0])
    initial_velocities_mps: List[float] = Field(default_factory=lambda: [18.0] * N_CARS)

    # true plant (all five cars)
    true_mass_kg: float = 1650.0
    true_gravity_mps2: float = 9.81
    true_f0_n: float = 0.1
    true_f1_nspm: float = 5.0
    true_f2_ns2pm2: float = 0.25
    true_rolling_coefficient: float = 0.015
    accel_cap_g: float = 0.3
    decel_cap_g: float = 0.3
    v_max_mps: float = 40.0

    # car 4's nominal model of itself and of the cars around it
    nominal_mass_kg: float = 1650.0
    nominal_f0_n: float = 0.0
    nominal_f1_nspm: float = 0.0
    nominal_f2_ns2pm2: float = 0.0
    nominal_rolling_coefficient: float = 0.2

    # human drivers: true law and car 4's nominal guess of it
    driver_k_b: float = 30.0
    driver_k_p: float = 2000.0
    nominal_driver_k_b: float = 20.0
    nominal_driver_k_p: float = 1000.0
    b_st_m: float = 25.0
    b_go_m: float = 100.0
    car_length_m: float = 0.0

    # road and lead car
    rolling_times_s: List[float] = Field(default_factory=lambda: [0.0, 10.0, 70.0])
    rolling_values: List[float] = Field(default_factory=lambda: [0.015, 0.03, 0.015])
    grade_start_s: float = 70.0
    grade_amplitude_mps2: float = 2.5
    grade_frequency_radps: float = 0.5
    lead_brake_rate_mps2: float = -2.5
    lead_high_velocity_mps: float = 30.0
    lead_sine_amplitude_mps: float = 1.5
    lead_gain_per_s: float = 2.0
    physics_substeps: int = Field(4, ge=1)

    # controller
    v_des_mps: float = 20.0
    c_delta: float = 3.0
    k_eps: float = 1.0e30
    k_eta: float = 1.0e20
    clf_rate_per_s: float = 0.6
    barrier_alpha_per_s: float = 5.0
    barrier_lambda_per_s: float = 0.1
    qp_max_iter: int = 100

    # learning
    gp_window: int = 30
    gp_noise_variance: float = 1.0e-2
    gp_signal_variance: float = 1.0
    gp_length_scale: float = 5.0
    gp_refit_period_steps: int = 50
    gp_optimize: bool = True
    gp_optimize_noise: bool = True
    gp_refit_on_miss: bool = True
    gp_observation_interval: bool = True
    gp_signal_variance_bounds: Tuple[float, float] = (1e-4, 1e2)
    gp_length_scale_bounds: Tuple[float, float] = (0.5, 1e2)
    gp_noise_variance_bounds: Tuple[float, float] = (1e-6, 1.0)
    gp_time_feature: bool = False
    residual_noise_std_mps2: float = 0.0

    @model_validator(mode="before")
    @classmethod
    def _parse_controller(cls, data):
        if isinstance(data, dict) and isinstance(data.get("controller"), str):
            data = {**data, "controller": ControllerVariant.parse(data["controller"])}
        return data

    @model_validator(mode="after")
    def _check(self) -> "ScenarioConfig":
        b = self.phase_boundaries_s
        if len(b) < 2 or any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise ValueError(f"phase_boundaries_s must be strictly increasing, got {b}")
        if b[0] < 0.0 or b[-1] > self.episode_length_s:
            raise ValueError("phase boundaries must lie inside the episode")
        if len(self.initial_positions_m) != N_CARS or len(self.initial_velocities_mps) != N_CARS:
            raise ValueError(f"initial positions and velocities need {N_CARS} entries")
        if any(hi >= lo for lo, hi in zip(self.initial_positions_m, self.initial_positions_m[1:])):
            raise ValueError("initial positions must decrease from car 1 to car 5")
        if abs(self.steps - self.episode_length_s * self.control_rate_hz) > 1e-6:
            raise ValueError("episode_length_s * control_rate_hz must be a whole number of steps")
        # building the typed views runs their own validators
        self.true_car_params()
        self.nominal_car_params()
        self.driver_params()
        self.controller_config()
        self.lead_profile()
        self.disturbance_schedule()
        return self

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate_hz

    @property
    def steps(self) -> int:
        return int(round(self.episode_length_s * self.control_rate_hz))

    def phases(self) -> List[Tuple[str, float, float]]:
        b = self.phase_boundaries_s
        return [(f"phase{k + 1}", lo, hi) for k, (lo, hi) in enumerate(zip(b, b[1:]))]

    def config_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()[:16]

    def true_car_params(self) -> CarParams:
        return CarParams(
            mass=self.true_mass_kg,
            gravity=self.true_gravity_mps2,
            f0=self.true_f0_n,
            f1=self.true_f1_nspm,
            f2=self.true_f2_ns2pm2,
            rolling_coefficient=self.true_rolling_coefficient,
            accel_cap=self.accel_cap_g,
            decel_cap=self.decel_cap_g,
            v_max=self.v_max_mps,
        )

    def nominal_car_params(self) -> CarParams:
        return CarParams(
            mass=self.nominal_mass_kg,
            gravity=self.true_gravity_mps2,
            f0=self.nominal_f0_n,
            f1=self.nominal_f1_nspm,
            f2=self.nominal_f2_ns2pm2,
            rolling_coefficient=self.nominal_rolling_coefficient,
            accel_cap=self.accel_cap_g,
            decel_cap=self.decel_cap_g,
            v_max=self.v_max_mps,
        )

    def driver_params(self) -> DriverParams:
        return DriverParams(
            k_b=self.driver_k_b,
            k_p=self.driver_k_p,
            b_st=self.b_st_m,
            b_go=self.b_go_m,
            length=self.car_length_m,
            v_max=self.v_max_mps,
        )

    def nominal_driver_params(self) -> DriverParams:
        return self.driver_params().model_copy(update={"k_b": self.nominal_driver_k_b, "k_p": self.nominal_driver_k_p})

    def disturbance_schedule(self) -> DisturbanceSchedule:
        return DisturbanceSchedule(
            rolling_times_s=self.rolling_times_s,
            rolling_values=self.rolling_values,
            grade_start_s=self.grade_start_s,
            grade_amplitude_mps2=self.grade_amplitude_mps2,
            grade_frequency_radps=self.grade_frequency_radps,
        )

    def lead_profile(self) -> LeadProfile:
        return LeadProfile(
            brake_rate_mps2=self.lead_brake_rate_mps2,
            high_velocity_mps=self.lead_high_velocity_mps,
            sine_amplitude_mps=self.lead_sine_amplitude_mps,
            horizon_s=self.episode_length_s,
        )

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(
            variant=self.controller,
            c_delta=self.c_delta,
            k_eps=self.k_eps,
            k_eta=self.k_eta,
            clf_rate=self.clf_rate_per_s,
            barrier_alpha=self.barrier_alpha_per_s,
            barrier_lambda=self.barrier_lambda_per_s,
            v_des=self.v_des_mps,
            headway_min_m=self.b_st_m,
            headway_max_m=self.b_go_m,
            gp_refit_period_steps=self.gp_refit_period_steps,
            qp_max_iter=self.qp_max_iter,
        )

    def gp_settings(self) -> LearnerConfig:
        return LearnerConfig(
            window_size=self.gp_window,
            noise_variance=self.gp_noise_variance,
            signal_variance=self.gp_signal_variance,
            length_scale=self.gp_length_scale,
            optimize=self.gp_optimize,
            optimize_noise=self.gp_optimize_noise,
            refit_on_miss=self.gp_refit_on_miss,
            miss_c_delta=self.c_delta,
            observation_interval=self.gp_observation_interval,
            time_feature=self.gp_time_feature,
            residual_noise_std=self.residual_noise_std_mps2,
            bounds=HyperBounds(
                signal_variance=self.gp_signal_variance_bounds,
                length_scale=self.gp_length_scale_bounds,
                noise_variance=self.gp_noise_variance_bounds,
            ),
        )

    def initial_state(self) -> FleetState:
        return FleetState.initial(self.initial_positions_m, self.initial_velocities_mps)

    def with_overrides(self, **updates) -> "ScenarioConfig":
        """Copy with some keys replaced, re-validated (``model_copy`` alone skips validation)."""
        data = self.model_dump()
        data.update({k: v for k, v in updates.items() if v is not None})
        return ScenarioConfig(**data)
