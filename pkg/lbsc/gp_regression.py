"""Online sliding-window Gaussian-process regression of scalar model-error channels.

Each channel keeps the last ``capacity`` residual observations, fits an exact GP with a
squared-exponential kernel and answers posterior mean/variance queries that feed the
robust constraint rows.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Deque, Optional, Sequence, Tuple

import numpy as np
from numpy.linalg import LinAlgError
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from scipy.stats import norm

from lbsc.errors import DataQualityError, FittingError
from utils.logging_utils import get_logger

logger = get_logger("lbsc.gp")

DEFAULT_CAPACITY = 30
DEFAULT_SIGNAL_VARIANCE = 1.0
DEFAULT_LENGTH_SCALE = 5.0
DEFAULT_NOISE_VARIANCE = 1e-2

# first attempt is unjittered, then 1e-10 escalating x10 up to 1e-4
JITTER_LADDER: Tuple[float, ...] = (0.0,) + tuple(1e-10 * 10.0**k for k in range(7))


class KernelHyper(BaseModel):
    """Squared-exponential kernel k(x, x') = sf2 * exp(-0.5 * sum(((x - x') / l)^2))."""

    model_config = ConfigDict(frozen=True)

    signal_variance: float = DEFAULT_SIGNAL_VARIANCE
    length_scales: Tuple[float, ...] = (DEFAULT_LENGTH_SCALE,)

    @field_validator("signal_variance")
    @classmethod
    def _positive_variance(cls, v: float) -> float:
        if not math.isfinite(v) or v <= 0.0:
            raise ValueError(f"signal_variance must be positive and finite, got {v}")
        return v

    @field_validator("length_scales")
    @classmethod
    def _positive_scales(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if not v:
            raise ValueError("length_scales must not be empty")
        for s in v:
            if not math.isfinite(s) or s <= 0.0:
                raise ValueError(f"length scales must be positive and finite, got {v}")
        return v

    @classmethod
    def default(cls, dim: int = 1) -> "KernelHyper":
        return cls(signal_variance=DEFAULT_SIGNAL_VARIANCE, length_scales=(DEFAULT_LENGTH_SCALE,) * dim)

    @property
    def dim(self) -> int:
        return len(self.length_scales)

    def kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        scales = np.asarray(self.length_scales, dtype=float)
        d2 = cdist(a / scales, b / scales, "sqeuclidean")
        return self.signal_variance * np.exp(-0.5 * d2)


class HyperBounds(BaseModel):
    """Box bounds used by ``optimize_hyperparameters`` (applied in log space)."""

    model_config = ConfigDict(frozen=True)

    signal_variance: Tuple[float, float] = (1e-4, 1e2)
    length_scale: Tuple[float, float] = (1e-2, 1e2)
    noise_variance: Tuple[float, float] = (1e-6, 1e1)

    @field_validator("signal_variance", "length_scale", "noise_variance")
    @classmethod
    def _ordered(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = v
        if not (0.0 < lo <= hi) or not math.isfinite(hi):
            raise ValueError(f"bounds must satisfy 0 < lower <= upper < inf, got {v}")
        return v


class ObservationWindow:
    """FIFO buffer of (feature vector, residual) pairs, capped at ``capacity``.

    Owned by a single writer; ``fit`` snapshots the arrays so fitted models never alias it.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, noise_variance: float = DEFAULT_NOISE_VARIANCE):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if not math.isfinite(noise_variance) or noise_variance < 0.0:
            raise ValueError(f"noise_variance must be finite and >= 0, got {noise_variance}")
        self.capacity = int(capacity)
        self.noise_variance = float(noise_variance)
        self._inputs: Deque[np.ndarray] = deque(maxlen=self.capacity)
        self._targets: Deque[float] = deque(maxlen=self.capacity)
        self._dim: Optional[int] = None

    def __len__(self) -> int:
        return len(self._targets)

    @property
    def dim(self) -> Optional[int]:
        return self._dim

    @property
    def inputs(self) -> np.ndarray:
        if not self._inputs:
            return np.empty((0, self._dim or 0))
        return np.vstack(self._inputs)

    @property
    def targets(self) -> np.ndarray:
        return np.fromiter(self._targets, dtype=float, count=len(self._targets))

    def push(self, x: Sequence[float] | float, target: float) -> "ObservationWindow":
        vec = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        if not np.all(np.isfinite(vec)) or not math.isfinite(float(target)):
            raise DataQualityError(f"non-finite observation rejected: x={vec.tolist()}, target={target}")
        if self._dim is None:
            self._dim = vec.size
        elif vec.size != self._dim:
            raise DataQualityError(f"feature dimension {vec.size} does not match window dimension {self._dim}")
        self._inputs.append(vec)
        self._targets.append(float(target))
        return self


def push_observation(window: ObservationWindow, x: Sequence[float] | float, target: float) -> ObservationWindow:
    """Append one observation, evicting the oldest entry once the window is full."""
    return window.push(x, target)


@dataclass(frozen=True)
class PosteriorMoment:
    mean: float
    variance: float

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    c_delta: float

    @property
    def delta(self) -> float:
        """Two-sided Gaussian tail mass left outside the interval."""
        return 1.0 - coverage_probability(self.c_delta)

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class GPModel:
    """Immutable fitted posterior. ``factor`` is the lower Cholesky factor of K + sn2*I (+ jitter)."""

    inputs: np.ndarray
    targets: np.ndarray
    noise_variance: float
    hyper: KernelHyper
    factor: Optional[np.ndarray]
    weights: np.ndarray
    jitter: float = 0.0

    @property
    def size(self) -> int:
        return int(self.targets.size)

    @property
    def dim(self) -> int:
        return self.hyper.dim

    def gram(self) -> np.ndarray:
        return self.hyper.kernel(self.inputs, self.inputs)


def fit(window: ObservationWindow, hyper: KernelHyper, noise_variance: Optional[float] = None) -> GPModel:
    """Factorize (K + sn2*I) for the current window; an empty window gives the prior.

    ``noise_variance`` overrides the window's own sn2 for this fit only.
    """
    X = window.inputs
    y = window.targets
    sn2 = window.noise_variance if noise_variance is None else float(noise_variance)
    if window.dim is not None and window.dim != hyper.dim:
        raise DataQualityError(f"window dimension {window.dim} does not match kernel dimension {hyper.dim}")
    n = y.size
    if n == 0:
        return GPModel(
            inputs=np.empty((0, hyper.dim)),
            targets=y,
            noise_variance=sn2,
            hyper=hyper,
            factor=None,
            weights=np.empty(0),
        )

    A = hyper.kernel(X, X) + sn2 * np.eye(n)
    for jitter in JITTER_LADDER:
        try:
            c, _ = cho_factor(A + jitter * np.eye(n) if jitter else A, lower=True, check_finite=False)
        except LinAlgError:
            continue
        if jitter:
            logger.warning(f"Gram matrix needed jitter {jitter:.1e} to factorize (n={n})")
        L = np.tril(c)
        weights = cho_solve((L, True), y, check_finite=False)
        return GPModel(
            inputs=X,
            targets=y,
            noise_variance=sn2,
            hyper=hyper,
            factor=L,
            weights=weights,
            jitter=jitter,
        )
    raise FittingError(f"Gram matrix of {n} observations is not positive definite", jitter=JITTER_LADDER[-1])


def predict(model: GPModel, query: Sequence[float] | float, observation: bool = False) -> PosteriorMoment:
    """Posterior mean k_n^T (K + sn2 I)^-1 d_n and variance k(x,x) - k_n^T (K + sn2 I)^-1 k_n.

    With ``observation`` the variance is that of the next noisy residual, i.e. plus sn2.
    """
    x = np.atleast_1d(np.asarray(query, dtype=float)).reshape(1, -1)
    if x.shape[1] != model.dim:
        raise DataQualityError(f"query dimension {x.shape[1]} does not match model dimension {model.dim}")
    prior = model.hyper.signal_variance
    extra = model.noise_variance if observation else 0.0
    if model.size == 0:
        return PosteriorMoment(mean=0.0, variance=prior + extra)
    k = model.hyper.kernel(model.inputs, x)[:, 0]
    mean = float(k @ model.weights)
    v = solve_triangular(model.factor, k, lower=True, check_finite=False)
    variance = prior - float(v @ v)
    return PosteriorMoment(mean=mean, variance=max(variance, 0.0) + extra)


def coverage_probability(c_delta: float) -> float:
    """Probability mass of a Gaussian within +-c_delta standard deviations (2 -> 0.9545, 3 -> 0.9973)."""
    return float(2.0 * norm.cdf(c_delta) - 1.0)


def c_delta_for_coverage(probability: float) -> float:
    if not 0.0 < probability < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {probability}")
    return float(norm.ppf(0.5 * (1.0 + probability)))


def confidence_interval(moment: PosteriorMoment, c_delta: float) -> ConfidenceInterval:
    if c_delta < 0.0:
        raise ValueError(f"c_delta must be >= 0, got {c_delta}")
    half = c_delta * moment.std
    return ConfidenceInterval(lower=moment.mean - half, upper=moment.mean + half, c_delta=c_delta)


def _log_marginal_likelihood(model: GPModel) -> float:
    n = model.size
    if n == 0:
        return 0.0
    data_fit = -0.5 * float(model.targets @ model.weights)
    complexity = -float(np.sum(np.log(np.diag(model.factor))))
    return data_fit + complexity - 0.5 * n * math.log(2.0 * math.pi)


def log_marginal_likelihood(window: ObservationWindow, hyper: KernelHyper, noise_variance: Optional[float] = None) -> float:
    return _log_marginal_likelihood(fit(window, hyper, noise_variance))


@dataclass(frozen=True)
class HyperFit:
    hyper: KernelHyper
    converged: bool
    log_marginal_likelihood: float
    noise_variance: Optional[float] = None


def _clip_hyper(hyper: KernelHyper, bounds: HyperBounds) -> KernelHyper:
    lo_s, hi_s = bounds.signal_variance
    lo_l, hi_l = bounds.length_scale
    return KernelHyper(
        signal_variance=min(max(hyper.signal_variance, lo_s), hi_s),
        length_scales=tuple(min(max(s, lo_l), hi_l) for s in hyper.length_scales),
    )


def optimize_hyperparameters(
    window: ObservationWindow,
    bounds: Optional[HyperBounds] = None,
    initial: Optional[KernelHyper] = None,
    optimize_noise: bool = False,
    initial_noise: Optional[float] = None,
) -> HyperFit:
    """Maximize the log marginal likelihood over (signal variance, length scales[, noise variance]).

    Never raises on optimizer trouble: the best of the optimum, the initial point and the
    default hyperparameters is returned, and ``converged`` reports whether L-BFGS-B
    finished cleanly. ``noise_variance`` on the result is only set with ``optimize_noise``.
    """
    bounds = bounds or HyperBounds()
    dim = window.dim or (initial.dim if initial else 1)
    start = _clip_hyper(initial or KernelHyper.default(dim), bounds)
    lo_n, hi_n = bounds.noise_variance
    noise0 = window.noise_variance if initial_noise is None else initial_noise
    noise0 = min(max(noise0, lo_n), hi_n) if optimize_noise else None
    if len(window) < 3:
        return HyperFit(hyper=initial or start, converged=True, log_marginal_likelihood=float("nan"), noise_variance=noise0)

    def score(hyper: KernelHyper, noise: Optional[float]) -> float:
        try:
            return log_marginal_likelihood(window, hyper, noise)
        except FittingError:
            return -math.inf

    def unpack(theta: np.ndarray) -> Tuple[KernelHyper, Optional[float]]:
        values = np.exp(theta)
        k = dim + 1
        hyper = KernelHyper(signal_variance=float(values[0]), length_scales=tuple(float(s) for s in values[1:k]))
        return hyper, (float(values[k]) if optimize_noise else None)

    def objective(theta: np.ndarray) -> float:
        hyper, noise = unpack(theta)
        value = score(hyper, noise)
        return -value if math.isfinite(value) else 1e25

    fallbacks = [(start, noise0)]
    default = _clip_hyper(KernelHyper.default(dim), bounds)
    if default != start:
        fallbacks.append((default, noise0))

    theta0 = np.log([start.signal_variance, *start.length_scales] + ([noise0] if optimize_noise else []))
    log_bounds = [tuple(np.log(bounds.signal_variance))] + [tuple(np.log(bounds.length_scale))] * dim
    if optimize_noise:
        log_bounds.append((math.log(lo_n), math.log(hi_n)))
    converged = False
    candidates = list(fallbacks)
    try:
        result = minimize(
            objective,
            theta0,
            method="L-BFGS-B",
            bounds=log_bounds,
            options={"maxiter": 200, "ftol": 1e-12, "gtol": 1e-9},
        )
        converged = bool(result.success)
        if not converged:
            logger.warning(f"Hyperparameter optimizer did not converge: {result.message}")
        hyper, noise = unpack(result.x)
        candidates.insert(0, (_clip_hyper(hyper, bounds), None if noise is None else min(max(noise, lo_n), hi_n)))
    except (ValueError, FloatingPointError) as e:
        logger.warning(f"Hyperparameter optimization failed, keeping start point: {e}")

    # first candidate wins ties, so the optimum is preferred over an equally good start
    scored = [(score(h, n), i, h, n) for i, (h, n) in enumerate(candidates)]
    best, _, hyper, noise = max(scored, key=lambda item: (item[0], -item[1]))
    return HyperFit(hyper=hyper, converged=converged, log_marginal_likelihood=best, noise_variance=noise)
