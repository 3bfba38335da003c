"""Uncertainty-robust barrier (safety) and Lyapunov (stability) rows, linear in u.

A row encodes ``coeff_u . u + rhs_const <= slack`` where the slack belongs to the
channel named by ``slack_channel``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Tuple

import numpy as np

from lbsc.errors import DataQualityError
from lbsc.gp_regression import PosteriorMoment
from lbsc.vehicle_dynamics import AffineModel, ScalarField, extended_barrier, lie_derivatives


class SlackChannel(str, Enum):
    SAFETY = "safety"
    STABILITY = "stability"
    NONE = "none"


@dataclass(frozen=True)
class ConstraintRow:
    coeff_u: np.ndarray
    rhs_const: float
    slack_channel: SlackChannel
    label: str = ""

    def __post_init__(self) -> None:
        coeff = np.atleast_1d(np.asarray(self.coeff_u, dtype=float))
        object.__setattr__(self, "coeff_u", coeff)
        object.__setattr__(self, "rhs_const", float(self.rhs_const))
        if not np.all(np.isfinite(coeff)) or not math.isfinite(self.rhs_const):
            raise DataQualityError(f"constraint row {self.label!r} has non-finite entries")

    def value(self, u: np.ndarray) -> float:
        """Left-hand side coeff_u . u + rhs_const; the row holds when this is <= its slack."""
        return float(self.coeff_u @ np.atleast_1d(u) + self.rhs_const)


@dataclass(frozen=True)
class BarrierSpec:
    """Barrier h with first-order extension gain ``lam`` and linear class-K gain ``k_alpha``."""

    field: ScalarField
    lam: float = 1.0
    k_alpha: float = 5.0

    def __post_init__(self) -> None:
        if self.lam <= 0.0 or self.k_alpha <= 0.0:
            raise ValueError(f"barrier gains must be positive, got lam={self.lam}, k_alpha={self.k_alpha}")

    def alpha(self, h: float) -> float:
        return self.k_alpha * h

    def extended(self, model: AffineModel) -> ScalarField:
        return extended_barrier(self.field, model, self.lam)


@dataclass(frozen=True)
class LyapunovSpec:
    field: ScalarField
    rate: float = 0.6

    def __post_init__(self) -> None:
        if self.rate <= 0.0:
            raise ValueError(f"Lyapunov rate must be positive, got {self.rate}")


@dataclass(frozen=True)
class MembershipCheck:
    satisfied: bool
    margin: float


def moment_vectors(n: int, moments: Optional[Mapping[int, PosteriorMoment]]) -> Tuple[np.ndarray, np.ndarray]:
    """Scatter per-channel posterior moments (keyed by state index) into mean / stddev vectors."""
    mu = np.zeros(n)
    sigma = np.zeros(n)
    for idx, moment in (moments or {}).items():
        mu[idx] = moment.mean
        sigma[idx] = moment.std
    return mu, sigma


def safety_row(
    spec: BarrierSpec,
    model: AffineModel,
    x: np.ndarray,
    moments: Optional[Mapping[int, PosteriorMoment]] = None,
    c_delta: float = 3.0,
    label: str = "safety",
) -> ConstraintRow:
    """-L_g h.u - L_f h - L_mu h + c_delta |L_sigma h| - alpha(h) <= eps, on the extended barrier."""
    h_ext = spec.extended(model)
    mu, sigma = moment_vectors(model.n, moments)
    lie = lie_derivatives(model, h_ext, x, mu, sigma)
    rhs = -lie.L_f - lie.L_mu + c_delta * lie.L_sigma_abs - spec.alpha(h_ext.value(x))
    return ConstraintRow(coeff_u=-lie.L_g, rhs_const=rhs, slack_channel=SlackChannel.SAFETY, label=label)


def stability_row(
    spec: LyapunovSpec,
    model: AffineModel,
    x: np.ndarray,
    moments: Optional[Mapping[int, PosteriorMoment]] = None,
    c_delta: float = 3.0,
    label: str = "stability",
) -> ConstraintRow:
    """L_g V.u + L_f V + L_mu V + c_delta |L_sigma V| + c V <= eta."""
    mu, sigma = moment_vectors(model.n, moments)
    lie = lie_derivatives(model, spec.field, x, mu, sigma)
    rhs = lie.L_f + lie.L_mu + c_delta * lie.L_sigma_abs + spec.rate * spec.field.value(x)
    return ConstraintRow(coeff_u=lie.L_g, rhs_const=rhs, slack_channel=SlackChannel.STABILITY, label=label)


def _state_rate(model: AffineModel, x: np.ndarray, u: np.ndarray, d: Optional[np.ndarray]) -> np.ndarray:
    xdot = model.f(x) + model.g(x) @ np.atleast_1d(np.asarray(u, dtype=float))
    if d is not None:
        xdot = xdot + np.asarray(d, dtype=float)
    return xdot


def satisfies_zcbf(
    spec: BarrierSpec,
    model: AffineModel,
    x: np.ndarray,
    u: np.ndarray,
    d: Optional[np.ndarray] = None,
) -> MembershipCheck:
    """Margin dh_ext/dt + alpha(h_ext) under model error d; non-negative inside the safe control set."""
    x = np.asarray(x, dtype=float)
    h_ext = spec.extended(model)
    margin = float(h_ext.gradient(x) @ _state_rate(model, x, u, d) + spec.alpha(h_ext.value(x)))
    return MembershipCheck(satisfied=margin >= 0.0, margin=margin)


def satisfies_esclf(
    spec: LyapunovSpec,
    model: AffineModel,
    x: np.ndarray,
    u: np.ndarray,
    d: Optional[np.ndarray] = None,
) -> MembershipCheck:
    """Margin dV/dt + c V under model error d; non-positive when exponential decay holds."""
    x = np.asarray(x, dtype=float)
    margin = float(spec.field.gradient(x) @ _state_rate(model, x, u, d) + spec.rate * spec.field.value(x))
    return MembershipCheck(satisfied=margin <= 0.0, margin=margin)
