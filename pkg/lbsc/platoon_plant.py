"""Ground-truth five-car CCC world: true car dynamics, human drivers, lead profile, road disturbances.

Cars are indexed 1..5 front to back; car i follows car i-1 and car 1 tracks the lead profile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from lbsc.errors import SimulationFault
from lbsc.vehicle_dynamics import CarParams, longitudinal_accel
from utils.logging_utils import get_logger

logger = get_logger("lbsc.plant")

N_CARS = 5
DEFAULT_INITIAL_POSITIONS = (240.0, 180.0, 120.0, 60.0, 0.0)
DEFAULT_INITIAL_VELOCITY = 18.0
DEFAULT_SUBSTEPS = 4
DEFAULT_LEAD_GAIN = 2.0


class DriverParams(BaseModel):
    """Human driver law u = k_b (V(B) - v) + k_p (v_front - v) with range policy V(B)."""

    model_config = ConfigDict(frozen=True)

    k_b: float = 30.0
    k_p: float = 2000.0
    b_st: float = 25.0
    b_go: float = 100.0
    k_i: Optional[float] = None
    length: float = 0.0
    v_max: float = 40.0

    @model_validator(mode="after")
    def _check(self) -> "DriverParams":
        if not 0.0 < self.b_st < self.b_go:
            raise ValueError(f"need 0 < b_st < b_go, got {self.b_st}, {self.b_go}")
        if self.k_i is not None and self.k_i <= 0.0:
            raise ValueError("range-policy slope k_i must be positive")
        return self

    @property
    def slope(self) -> float:
        """Range-policy slope; defaults to the value that makes V continuous at B_go."""
        if self.k_i is None:
            return self.v_max / (self.b_go - self.b_st)
        return self.k_i


class DisturbanceSchedule(BaseModel):
    """Piecewise-constant rolling coefficient and a sinusoidal grade term (g * dtheta, m/s^2).

    An empty ``rolling_times_s`` leaves every car on its own rolling coefficient.
    """

    model_config = ConfigDict(frozen=True)

    rolling_times_s: List[float] = Field(default_factory=lambda: [0.0, 10.0, 70.0])
    rolling_values: List[float] = Field(default_factory=lambda: [0.015, 0.03, 0.015])
    grade_start_s: float = 70.0
    grade_amplitude_mps2: float = 2.5
    grade_frequency_radps: float = 0.5

    @model_validator(mode="after")
    def _check(self) -> "DisturbanceSchedule":
        if len(self.rolling_times_s) != len(self.rolling_values):
            raise ValueError("rolling_times_s and rolling_values must have the same length")
        if any(b <= a for a, b in zip(self.rolling_times_s, self.rolling_times_s[1:])):
            raise ValueError("rolling_times_s must be strictly increasing")
        if any(v < 0.0 for v in self.rolling_values):
            raise ValueError("rolling coefficients must be non-negative")
        return self

    @classmethod
    def calm(cls) -> "DisturbanceSchedule":
        return cls(rolling_times_s=[], rolling_values=[], grade_amplitude_mps2=0.0)

    def rolling_coefficient(self, t: float) -> Optional[float]:
        if not self.rolling_times_s:
            return None
        idx = int(np.searchsorted(self.rolling_times_s, t, side="right")) - 1
        return self.rolling_values[max(idx, 0)]

    def grade_accel(self, t: float) -> float:
        if t < self.grade_start_s:
            return 0.0
        return self.grade_amplitude_mps2 * math.sin(self.grade_frequency_radps * t)


class LeadProfile(BaseModel):
    """Target velocity of car 1: ramp to cruise, ramp up, hold, brake back to cruise, then a sine."""

    model_config = ConfigDict(frozen=True)

    initial_velocity_mps: float = 18.0
    cruise_velocity_mps: float = 20.0
    first_ramp_start_s: float = 0.0
    first_ramp_rate_mps2: float = 0.4
    high_velocity_mps: float = 30.0
    second_ramp_start_s: float = 20.0
    second_ramp_rate_mps2: float = 2.0
    brake_start_s: float = 40.0
    brake_rate_mps2: float = -2.5
    sine_start_s: float = 70.0
    sine_amplitude_mps: float = 1.5
    sine_frequency_radps: float = 0.5
    horizon_s: float = 100.0

    @model_validator(mode="after")
    def _check(self) -> "LeadProfile":
        if self.high_velocity_mps < self.cruise_velocity_mps or self.cruise_velocity_mps < self.initial_velocity_mps:
            raise ValueError("lead profile velocities must not decrease from initial to cruise to high")
        if self.first_ramp_rate_mps2 <= 0.0 or self.second_ramp_rate_mps2 <= 0.0:
            raise ValueError("acceleration ramps must have positive rates")
        if self.brake_rate_mps2 >= 0.0:
            raise ValueError(f"brake_rate_mps2 must be negative, got {self.brake_rate_mps2}")
        first_end = self.first_ramp_start_s + (self.cruise_velocity_mps - self.initial_velocity_mps) / self.first_ramp_rate_mps2
        second_end = self.second_ramp_start_s + (self.high_velocity_mps - self.cruise_velocity_mps) / self.second_ramp_rate_mps2
        brake_end = self.brake_start_s + (self.cruise_velocity_mps - self.high_velocity_mps) / self.brake_rate_mps2
        if not (first_end <= self.second_ramp_start_s and second_end <= self.brake_start_s and brake_end <= self.sine_start_s):
            raise ValueError("lead profile ramps overlap the next phase")
        return self

    def velocity(self, t: float) -> float:
        t = min(max(t, 0.0), self.horizon_s)
        if t < self.second_ramp_start_s:
            rise = self.first_ramp_rate_mps2 * max(t - self.first_ramp_start_s, 0.0)
            return self.initial_velocity_mps + min(rise, self.cruise_velocity_mps - self.initial_velocity_mps)
        if t < self.brake_start_s:
            rise = self.second_ramp_rate_mps2 * (t - self.second_ramp_start_s)
            return self.cruise_velocity_mps + min(rise, self.high_velocity_mps - self.cruise_velocity_mps)
        if t < self.sine_start_s:
            return max(self.high_velocity_mps + self.brake_rate_mps2 * (t - self.brake_start_s), self.cruise_velocity_mps)
        return self.cruise_velocity_mps + self.sine_amplitude_mps * math.sin(
            self.sine_frequency_radps * (t - self.sine_start_s)
        )

    def max_rate(self) -> float:
        return max(
            self.first_ramp_rate_mps2,
            self.second_ramp_rate_mps2,
            abs(self.brake_rate_mps2),
            self.sine_amplitude_mps * self.sine_frequency_radps,
        )


@dataclass(frozen=True)
class FleetState:
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        for name in ("p", "v", "a"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if arr.size != N_CARS:
                raise ValueError(f"{name} must have {N_CARS} entries, got {arr.size}")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "t", float(self.t))

    @classmethod
    def initial(
        cls,
        positions: Sequence[float] = DEFAULT_INITIAL_POSITIONS,
        velocities: Sequence[float] | float = DEFAULT_INITIAL_VELOCITY,
    ) -> "FleetState":
        v = np.broadcast_to(np.asarray(velocities, dtype=float), (N_CARS,)).copy()
        return cls(p=np.asarray(positions, dtype=float), v=v, a=np.zeros(N_CARS), t=0.0)

    def headway(self, car: int) -> float:
        """Gap from car (1-based) to the car in front of it."""
        return float(self.p[car - 2] - self.p[car - 1])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.v)) and math.isfinite(self.t))

    def as_dump(self) -> Dict[str, Any]:
        return {"t": self.t, "p": self.p.tolist(), "v": self.v.tolist(), "a": self.a.tolist()}


def range_policy(headway: float, params: DriverParams) -> float:
    """Desired speed for a given headway: 0 below B_st, v_max above B_go, linear between."""
    if headway <= params.b_st:
        return 0.0
    if headway >= params.b_go:
        return params.v_max
    return params.slope * (headway - params.b_st)


def range_policy_slope(headway: float, params: DriverParams) -> float:
    if params.b_st < headway < params.b_go:
        return params.slope
    return 0.0


def driver_force(
    p_front: float, v_front: float, p: float, v: float, driver: DriverParams, car: CarParams
) -> float:
    """Clamped human wheel force for a car at (p, v) behind a car at (p_front, v_front)."""
    headway = p_front - p - driver.length
    raw = driver.k_b * (range_policy(headway, driver) - v) + driver.k_p * (v_front - v)
    return car.clamp_force(raw)


def driver_force_partials(
    p_front: float, v_front: float, p: float, v: float, driver: DriverParams, car: CarParams
) -> Tuple[float, float]:
    """(du/dp, du/dv) of ``driver_force`` with respect to the follower's own position and speed."""
    headway = p_front - p - driver.length
    raw = driver.k_b * (range_policy(headway, driver) - v) + driver.k_p * (v_front - v)
    if raw <= car.u_min or raw >= car.u_max:
        return 0.0, 0.0
    return -driver.k_b * range_policy_slope(headway, driver), -(driver.k_b + driver.k_p)


def human_driver_control(i: int, state: FleetState, driver: DriverParams, car: CarParams) -> float:
    if not 2 <= i <= N_CARS:
        raise ValueError(f"car {i} has no front car")
    f, r = i - 2, i - 1
    return driver_force(state.p[f], state.v[f], state.p[r], state.v[r], driver, car)


def lead_velocity_profile(t: float, profile: Optional[LeadProfile] = None) -> float:
    return (profile or LeadProfile()).velocity(t)


def integrate_car(
    p: float,
    v: float,
    u: float,
    car: CarParams,
    schedule: DisturbanceSchedule,
    t0: float,
    dt: float,
    substeps: int = DEFAULT_SUBSTEPS,
) -> Tuple[float, float]:
    """Classical RK4 over [t0, t0 + dt] with the force held constant."""
    h = dt / substeps

    def accel(t: float, vel: float) -> float:
        return longitudinal_accel(vel, u, car, schedule.grade_accel(t), schedule.rolling_coefficient(t))

    t = t0
    for _ in range(substeps):
        k1p, k1v = v, accel(t, v)
        k2p, k2v = v + 0.5 * h * k1v, accel(t + 0.5 * h, v + 0.5 * h * k1v)
        k3p, k3v = v + 0.5 * h * k2v, accel(t + 0.5 * h, v + 0.5 * h * k2v)
        k4p, k4v = v + h * k3v, accel(t + h, v + h * k3v)
        p = p + h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        v = v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        t = t + h
    return p, max(v, 0.0)


class PlatoonPlant:
    """True dynamics of the five cars; car 1 runs an internal profile-tracking law."""

    def __init__(
        self,
        cars: Sequence[CarParams],
        schedule: Optional[DisturbanceSchedule] = None,
        lead: Optional[LeadProfile] = None,
        lead_gain: float = DEFAULT_LEAD_GAIN,
        substeps: int = DEFAULT_SUBSTEPS,
    ):
        if len(cars) != N_CARS:
            raise ValueError(f"expected {N_CARS} car parameter sets, got {len(cars)}")
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.cars = list(cars)
        self.schedule = schedule or DisturbanceSchedule()
        self.lead = lead or LeadProfile()
        self.lead_gain = lead_gain
        self.substeps = substeps

    def lead_control(self, state: FleetState, schedule: Optional[DisturbanceSchedule] = None) -> float:
        sched = schedule or self.schedule
        car = self.cars[0]
        v1 = float(state.v[0])
        target = self.lead.velocity(state.t)
        ff = car.resistance(v1, sched.rolling_coefficient(state.t)) - car.mass * sched.grade_accel(state.t)
        return car.clamp_force(self.lead_gain * car.mass * (target - v1) + ff)

    def applied_controls(
        self, state: FleetState, controls: Sequence[float], schedule: Optional[DisturbanceSchedule] = None
    ) -> np.ndarray:
        """Forces actually applied: car 1 from its tracking law, the rest clamped to their boxes."""
        u = np.asarray(controls, dtype=float).reshape(-1).copy()
        if u.size != N_CARS:
            raise ValueError(f"expected {N_CARS} controls, got {u.size}")
        u[0] = self.lead_control(state, schedule)
        for k in range(1, N_CARS):
            u[k] = self.cars[k].clamp_force(u[k])
        return u

    def step(
        self,
        state: FleetState,
        controls: Sequence[float],
        dt: float,
        schedule: Optional[DisturbanceSchedule] = None,
    ) -> FleetState:
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        sched = schedule or self.schedule
        u = self.applied_controls(state, controls, sched)
        if not np.all(np.isfinite(u)):
            raise SimulationFault("non-finite control force", {**state.as_dump(), "u": u.tolist()})

        p_next = np.empty(N_CARS)
        v_next = np.empty(N_CARS)
        for k in range(N_CARS):
            p_next[k], v_next[k] = integrate_car(
                state.p[k], state.v[k], u[k], self.cars[k], sched, state.t, dt, self.substeps
            )
        nxt = replace(state, p=p_next, v=v_next, a=(v_next - state.v) / dt, t=state.t + dt)
        if not nxt.is_finite():
            logger.error(f"non-finite plant state at t={nxt.t:.2f}")
            raise SimulationFault("non-finite plant state", {**nxt.as_dump(), "u": u.tolist()})
        return nxt
