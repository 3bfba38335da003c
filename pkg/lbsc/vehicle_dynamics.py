"""Control-affine longitudinal vehicle models and Lie-derivative helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from lbsc.errors import DataQualityError


class CarParams(BaseModel):
    """Longitudinal car parameters.

    mass (kg), gravity (m/s^2), f0 (N), f1 (N s/m), f2 (N s^2/m^2), rolling_coefficient (-),
    accel_cap / decel_cap (fractions of M g), v_max (m/s).
    """

    model_config = ConfigDict(frozen=True)

    mass: float = 1650.0
    gravity: float = 9.81
    f0: float = 0.1
    f1: float = 5.0
    f2: float = 0.25
    rolling_coefficient: float = 0.015
    accel_cap: float = 0.3
    decel_cap: float = 0.3
    v_max: float = 40.0

    @model_validator(mode="after")
    def _check(self) -> "CarParams":
        values = [self.mass, self.gravity, self.f0, self.f1, self.f2, self.rolling_coefficient, self.v_max]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("car parameters must be finite")
        if self.mass <= 0.0 or self.gravity <= 0.0:
            raise ValueError("mass and gravity must be positive")
        for name, cap in (("accel_cap", self.accel_cap), ("decel_cap", self.decel_cap)):
            if not 0.0 < cap <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {cap}")
        return self

    @classmethod
    def crude_nominal(cls) -> "CarParams":
        """Prior model known to the autonomous car: no drag, inflated rolling resistance."""
        return cls(f0=0.0, f1=0.0, f2=0.0, rolling_coefficient=0.2)

    @property
    def u_min(self) -> float:
        return -self.decel_cap * self.mass * self.gravity

    @property
    def u_max(self) -> float:
        return self.accel_cap * self.mass * self.gravity

    def clamp_force(self, u: float) -> float:
        return min(max(u, self.u_min), self.u_max)

    def aerodynamic_drag(self, v: float) -> float:
        return self.f0 + self.f1 * v + self.f2 * v * v

    def rolling_resistance(self, rolling_coefficient: Optional[float] = None) -> float:
        ff = self.rolling_coefficient if rolling_coefficient is None else rolling_coefficient
        return ff * self.mass * self.gravity

    def resistance(self, v: float, rolling_coefficient: Optional[float] = None) -> float:
        return self.aerodynamic_drag(v) + self.rolling_resistance(rolling_coefficient)


def longitudinal_accel(
    v: float,
    u: float,
    params: CarParams,
    grade_accel: float = 0.0,
    rolling_coefficient: Optional[float] = None,
) -> float:
    """dv/dt = (-F_r - F_f)/M + g*dtheta + u/M, with F_r = f0 + f1 v + f2 v^2 and F_f = f_f M g."""
    return (-params.resistance(v, rolling_coefficient) + u) / params.mass + grade_accel


def residual_observation(v_prev: float, v_now: float, dt: float, u: float, nominal: CarParams) -> float:
    """Backward-difference acceleration minus the nominal model's prediction at (v_prev, u)."""
    if not dt > 0.0:
        raise DataQualityError(f"dt must be positive, got {dt}")
    return (v_now - v_prev) / dt - longitudinal_accel(v_prev, u, nominal, 0.0)


def finite_difference_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        grad[j] = (fn(x + e) - fn(x - e)) / (2.0 * step)
    return grad


def finite_difference_jacobian(
    fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-6
) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * step))
    return np.column_stack(cols)


@dataclass(frozen=True)
class AffineModel:
    """xdot = f(x) + g(x) u with n states and m inputs."""

    n: int
    m: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_map: Callable[[np.ndarray], np.ndarray]
    drift_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def has_analytic_jacobian(self) -> bool:
        return self.drift_jacobian is not None

    def f(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.drift(x), dtype=float).reshape(self.n)

    def g(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.input_map(x), dtype=float).reshape(self.n, self.m)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        if self.drift_jacobian is not None:
            return np.asarray(self.drift_jacobian(x), dtype=float).reshape(self.n, self.n)
        return finite_difference_jacobian(self.f, x)


@dataclass(frozen=True)
class ScalarField:
    """Scalar function of the state (barrier h or Lyapunov V) with analytic derivatives."""

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    def __call__(self, x: np.ndarray) -> float:
        return float(self.value(x))


class LieTerms(NamedTuple):
    L_f: float
    L_g: np.ndarray
    L_mu: float
    L_sigma_abs: float


def lie_derivatives(
    model: AffineModel,
    field: ScalarField,
    x: np.ndarray,
    mu: Optional[np.ndarray] = None,
    sigma: Optional[np.ndarray] = None,
) -> LieTerms:
    """L_f h, L_g h, L_mu h and sum_j |dh/dx_j| sigma_j at x.

    The sigma term is composed channel-wise so it bounds the worst case over independent
    per-channel error intervals.
    """
    x = np.asarray(x, dtype=float)
    if x.size != model.n:
        raise DataQualityError(f"state dimension {x.size} does not match model dimension {model.n}")
    grad = np.asarray(field.gradient(x), dtype=float)
    mu = np.zeros(model.n) if mu is None else np.asarray(mu, dtype=float)
    sigma = np.zeros(model.n) if sigma is None else np.asarray(sigma, dtype=float)
    if grad.size != model.n or mu.size != model.n or sigma.size != model.n:
        raise DataQualityError("gradient, mu and sigma must match the state dimension")
    return LieTerms(
        L_f=float(grad @ model.f(x)),
        L_g=grad @ model.g(x),
        L_mu=float(grad @ mu),
        L_sigma_abs=float(np.abs(grad) @ sigma),
    )


def extended_barrier(field: ScalarField, model: AffineModel, lam: float) -> ScalarField:
    """First-order extension h_ext = L_f h + lam * h for a barrier with L_g h == 0."""

    def value(x: np.ndarray) -> float:
        return float(np.asarray(field.gradient(x)) @ model.f(x) + lam * field.value(x))

    def gradient(x: np.ndarray) -> np.ndarray:
        grad = np.asarray(field.gradient(x), dtype=float)
        out = model.jacobian(x).T @ grad + lam * grad
        if field.hessian is not None:
            out = out + np.asarray(field.hessian(x), dtype=float) @ model.f(x)
        return out

    return ScalarField(value=value, gradient=gradient, name=f"ext({field.name})")
