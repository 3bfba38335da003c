"""Dense primal active-set solver for the slacked safety/stability QP.

    min  1/2 (u - u_ref)^T H (u - u_ref) + K_eps eps^2 + K_eta eta^2
    s.t. a_i . u + b_i <= eps   (safety rows)
         a_j . u + b_j <= eta   (stability rows)
         a_k . u + b_k <= 0     (hard rows)
         u_min <= u <= u_max,  eps >= 0,  eta >= 0

Internally u is replaced by w = L^T (u - u_ref) with H = L L^T so the input block of the
Hessian is the identity, and every inequality is normalized to unit length. The slacks
stay in row units; their penalties only appear on the Hessian diagonal, which keeps the
working-set matrices well conditioned even for K_eps = 1e30.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import null_space, solve_triangular
from scipy.optimize import linprog, nnls

from lbsc.constraint_builder import ConstraintRow, SlackChannel
from lbsc.errors import QPInfeasibleError
from utils.logging_utils import get_logger

logger = get_logger("lbsc.qp")

DEFAULT_MAX_ITER = 100
KKT_TOLERANCE = 1e-8
ACTIVE_TOLERANCE = 1e-9
_MULTIPLIER_TOL = 1e-12
_RATE_TOL = 1e-14


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class QProblem:
    H: np.ndarray
    k_eps: float
    k_eta: float
    rows: Tuple[ConstraintRow, ...]
    u_min: np.ndarray
    u_max: np.ndarray
    u_ref: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        m = H.shape[0]
        u_min = np.atleast_1d(np.asarray(self.u_min, dtype=float))
        u_max = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        u_ref = np.zeros(m) if self.u_ref is None else np.atleast_1d(np.asarray(self.u_ref, dtype=float))
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "u_min", u_min)
        object.__setattr__(self, "u_max", u_max)
        object.__setattr__(self, "u_ref", u_ref)
        object.__setattr__(self, "rows", tuple(self.rows))

        if H.shape != (m, m) or not np.allclose(H, H.T, rtol=1e-12, atol=0.0):
            raise ValueError("H must be a symmetric square matrix")
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError as e:
            raise ValueError("H must be positive definite") from e
        if not (self.k_eps >= self.k_eta > 0.0) or not math.isfinite(self.k_eps):
            raise ValueError(f"slack penalties must satisfy K_eps >= K_eta > 0, got {self.k_eps}, {self.k_eta}")
        if u_min.shape != (m,) or u_max.shape != (m,) or u_ref.shape != (m,):
            raise ValueError("box bounds and u_ref must have one entry per input")
        if np.any(u_min > u_max):
            raise ValueError("u_min must not exceed u_max")
        for row in self.rows:
            if row.coeff_u.shape != (m,):
                raise ValueError(f"row {row.label!r} has {row.coeff_u.size} coefficients, expected {m}")

    @property
    def m(self) -> int:
        return self.H.shape[0]

    def slacks_for(self, u: np.ndarray) -> Tuple[float, float]:
        """Smallest non-negative (eps, eta) that make every slacked row hold at u."""
        eps = eta = 0.0
        for row in self.rows:
            val = row.value(u)
            if row.slack_channel is SlackChannel.SAFETY:
                eps = max(eps, val)
            elif row.slack_channel is SlackChannel.STABILITY:
                eta = max(eta, val)
        return eps, eta

    def objective(self, u: np.ndarray, eps: float, eta: float) -> float:
        du = np.atleast_1d(u) - self.u_ref
        return float(0.5 * du @ self.H @ du + self.k_eps * eps * eps + self.k_eta * eta * eta)


@dataclass(frozen=True)
class QPSolution:
    u_star: np.ndarray
    eps: float
    eta: float
    status: SolveStatus
    kkt_residual: float
    iterations: int
    objective: float = float("nan")
    solve_ms: float = 0.0


@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    primal_feasibility: float
    complementarity: float

    @property
    def max_residual(self) -> float:
        return max(self.stationarity, self.primal_feasibility, self.complementarity)


@dataclass(frozen=True)
class _Scaled:
    """Problem in (w, eps, eta) coordinates: min 1/2 x^T diag(D) x  s.t.  G x <= h."""

    G: np.ndarray
    h: np.ndarray
    diag: np.ndarray
    L: np.ndarray
    L_inv_T: np.ndarray
    u_ref: np.ndarray
    m: int


def _scale(problem: QProblem) -> _Scaled:
    m = problem.m
    L = np.linalg.cholesky(problem.H)
    L_inv = solve_triangular(L, np.eye(m), lower=True)
    L_inv_T = L_inv.T
    u_ref = problem.u_ref
    nvar = m + 2

    G_rows: List[np.ndarray] = []
    h_vals: List[float] = []

    def add(g: np.ndarray, h: float) -> None:
        norm = float(np.linalg.norm(g))
        if norm == 0.0:
            if h < 0.0:
                raise QPInfeasibleError("a row with no input or slack dependence is violated")
            return
        G_rows.append(g / norm)
        h_vals.append(h / norm)

    for row in problem.rows:
        g = np.zeros(nvar)
        g[:m] = L_inv @ row.coeff_u
        if row.slack_channel is SlackChannel.SAFETY:
            g[m] = -1.0
        elif row.slack_channel is SlackChannel.STABILITY:
            g[m + 1] = -1.0
        add(g, -row.rhs_const - float(row.coeff_u @ u_ref))
    for i in range(m):
        g = np.zeros(nvar)
        g[:m] = L_inv_T[i]
        add(g, problem.u_max[i] - u_ref[i])
        add(-g, u_ref[i] - problem.u_min[i])
    for k in (m, m + 1):
        g = np.zeros(nvar)
        g[k] = -1.0
        add(g, 0.0)

    diag = np.concatenate([np.ones(m), [2.0 * problem.k_eps, 2.0 * problem.k_eta]])
    return _Scaled(
        G=np.vstack(G_rows),
        h=np.asarray(h_vals),
        diag=diag,
        L=L,
        L_inv_T=L_inv_T,
        u_ref=u_ref,
        m=m,
    )


def _to_scaled(sc: _Scaled, u: np.ndarray, eps: float, eta: float) -> np.ndarray:
    return np.concatenate([sc.L.T @ (np.atleast_1d(u) - sc.u_ref), [eps, eta]])


def _feasible_start(problem: QProblem) -> np.ndarray:
    u0 = np.clip(problem.u_ref, problem.u_min, problem.u_max)
    hard = [r for r in problem.rows if r.slack_channel is SlackChannel.NONE]
    if all(r.value(u0) <= 0.0 for r in hard):
        return u0
    res = linprog(
        c=np.zeros(problem.m),
        A_ub=np.vstack([r.coeff_u for r in hard]),
        b_ub=np.array([-r.rhs_const for r in hard]),
        bounds=list(zip(problem.u_min, problem.u_max)),
        method="highs",
    )
    if res.status != 0:
        raise QPInfeasibleError(f"hard rows infeasible inside the input box: {res.message}")
    return np.clip(res.x, problem.u_min, problem.u_max)


def _subspace_step(G_w: np.ndarray, diag: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Minimizer p of 1/2 (x+p)^T D (x+p) with G_w p = 0 (null-space method)."""
    if G_w.shape[0] == 0:
        return -grad / diag
    Z = null_space(G_w)
    if Z.shape[1] == 0:
        return np.zeros_like(grad)
    reduced = Z.T @ (diag[:, None] * Z)
    return -Z @ np.linalg.solve(reduced, Z.T @ grad)


def _multipliers(G_w: np.ndarray, grad: np.ndarray) -> np.ndarray:
    lam, *_ = np.linalg.lstsq(G_w.T, -grad, rcond=None)
    return lam


def kkt_verify(problem: QProblem, solution: QPSolution) -> KKTReport:
    """Scaled stationarity, primal feasibility and complementarity residuals of a candidate point.

    The check runs with the slacks rescaled by sqrt(2 K) so the whole Hessian is the
    identity; rows are renormalized in those coordinates. A slack lost to roundoff then
    contributes O(1/sqrt(K)) instead of 2 K times the roundoff. Multipliers are recovered
    by non-negative least squares over the (tolerance-)active inequalities and every
    residual is relative to the magnitude of the terms it balances.
    """
    sc = _scale(problem)
    root = np.sqrt(sc.diag)
    G = sc.G / root
    norms = np.linalg.norm(G, axis=1)
    G = G / norms[:, None]
    h = sc.h / norms
    x = root * _to_scaled(sc, solution.u_star, solution.eps, solution.eta)
    grad = x
    viol = G @ x - h
    scale_h = 1.0 + np.abs(h)
    primal = float(max(0.0, np.max(viol / scale_h)))

    active = viol >= -ACTIVE_TOLERANCE * scale_h
    if np.any(active):
        G_a = G[active]
        lam, _ = nnls(G_a.T, -grad)
        balance = G_a.T @ lam
        residual = grad + balance
        complementarity = float(np.max(lam * np.abs(viol[active])) / (1.0 + np.max(np.abs(lam))))
    else:
        balance = np.zeros_like(grad)
        residual = grad
        complementarity = 0.0
    denom = 1.0 + max(float(np.max(np.abs(grad))), float(np.max(np.abs(balance))))
    stationarity = float(np.max(np.abs(residual)) / denom)
    return KKTReport(stationarity=stationarity, primal_feasibility=primal, complementarity=complementarity)


def _reported_slack(iterate: float, at_u: float) -> float:
    """Slack to report: the iterate, unless the rows at the clipped u* need more than roundoff beyond it."""
    if at_u > iterate + ACTIVE_TOLERANCE * (1.0 + abs(iterate)):
        return at_u
    return max(iterate, 0.0)


def solve(problem: QProblem, max_iter: int = DEFAULT_MAX_ITER) -> QPSolution:
    """Primal active-set solve from a feasible start; returns the best iterate on ``max_iter``."""
    started = time.perf_counter()
    sc = _scale(problem)
    G, h, diag, m = sc.G, sc.h, sc.diag, sc.m

    u0 = _feasible_start(problem)
    eps0, eta0 = problem.slacks_for(u0)
    x = _to_scaled(sc, u0, eps0, eta0)

    working: List[int] = []
    status = SolveStatus.MAX_ITER
    iterations = 0
    for iterations in range(1, max_iter + 1):
        grad = diag * x
        p = _subspace_step(G[working], diag, grad)

        Gp = G @ p
        gap = h - G @ x
        alpha, blocking = 1.0, None
        # full-step overshoot; ties on the step length go to the row overshot most
        overshoot = Gp - np.maximum(gap, 0.0)
        for i in range(G.shape[0]):
            if i in working or Gp[i] <= _RATE_TOL * (1.0 + abs(h[i])):
                continue
            step = max(gap[i], 0.0) / Gp[i]
            if step < alpha or (blocking is not None and step == alpha and overshoot[i] > overshoot[blocking]):
                alpha, blocking = step, i
        x = x + alpha * p

        if blocking is not None:
            working.append(blocking)
            continue

        if not working:
            status = SolveStatus.OPTIMAL
            break
        lam = _multipliers(G[working], diag * x)
        if np.min(lam) >= -_MULTIPLIER_TOL * (1.0 + np.max(np.abs(lam))):
            status = SolveStatus.OPTIMAL
            break
        working.pop(int(np.argmin(lam)))

    u = np.clip(sc.u_ref + sc.L_inv_T @ x[:m], problem.u_min, problem.u_max)
    eps, eta = (_reported_slack(float(x[k]), at_u) for k, at_u in zip((m, m + 1), problem.slacks_for(u)))
    draft = QPSolution(u_star=u, eps=eps, eta=eta, status=status, kkt_residual=float("nan"), iterations=iterations)
    report = kkt_verify(problem, draft)
    if status is SolveStatus.MAX_ITER:
        logger.warning(f"QP stopped at iteration cap {max_iter}; KKT residual {report.max_residual:.2e}")
    elif report.max_residual > KKT_TOLERANCE:
        logger.debug(f"QP KKT residual {report.max_residual:.2e} above {KKT_TOLERANCE:.0e}")
    return QPSolution(
        u_star=u,
        eps=eps,
        eta=eta,
        status=status,
        kkt_residual=report.max_residual,
        iterations=iterations,
        objective=problem.objective(u, eps, eta),
        solve_ms=(time.perf_counter() - started) * 1e3,
    )
