"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

All accounting uses the add/remove-one neighbouring relation, integer Renyi
orders and the classic RDP -> (eps, delta) conversion

    eps = min_a  rdp(a) + log(1/delta) / (a - 1).

Every function here is pure; nothing is cached or shared between calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import special

__all__ = [
    "AccountingError",
    "CalibrationError",
    "CalibrationInfeasible",
    "PrivacySpec",
    "GaussianMechanismSpec",
    "OrderGrid",
    "RdpCurve",
    "DEFAULT_ORDERS",
    "default_delta",
    "gaussian_sigma_for",
    "rdp_gaussian",
    "rdp_subsampled_gaussian",
    "rdp_curve",
    "compose",
    "rdp_to_eps",
    "account",
    "calibrate_sigma",
]


class AccountingError(ValueError):
    """Raised for out-of-domain accountant inputs."""


class CalibrationError(ArithmeticError):
    """Binary search for the noise multiplier failed to converge."""


class CalibrationInfeasible(CalibrationError):
    """No noise multiplier inside the search range reaches the target."""


def _check_delta(delta: float, name: str = "delta") -> None:
    if not 0.0 < delta < 1.0:
        raise AccountingError(f"{name} must lie in (0, 1), got {delta!r}")


@dataclass(frozen=True)
class PrivacySpec:
    target_epsilon: float
    delta: float
    sampling_rate: float
    steps: int
    clip_norm: float = 1.0
    noise_multiplier: Optional[float] = None

    def __post_init__(self):
        if not self.target_epsilon > 0:
            raise AccountingError(f"target_epsilon must be > 0, got {self.target_epsilon!r}")
        _check_delta(self.delta)
        if not 0.0 <= self.sampling_rate <= 1.0:
            raise AccountingError(f"sampling_rate must lie in [0, 1], got {self.sampling_rate!r}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise AccountingError(f"steps must be a non-negative integer, got {self.steps!r}")
        if not self.clip_norm > 0:
            raise AccountingError(f"clip_norm must be > 0, got {self.clip_norm!r}")
        if self.noise_multiplier is not None and not self.noise_multiplier > 0:
            raise AccountingError(
                f"noise_multiplier must be > 0 when set, got {self.noise_multiplier!r}")


@dataclass(frozen=True)
class GaussianMechanismSpec:
    sensitivity: float
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.sensitivity > 0:
            raise AccountingError(f"sensitivity must be > 0, got {self.sensitivity!r}")
        if not self.epsilon > 0:
            raise AccountingError(f"epsilon must be > 0, got {self.epsilon!r}")
        _check_delta(self.delta)


class OrderGrid(tuple):
    """Strictly increasing tuple of integer Renyi orders, all >= 2."""

    def __new__(cls, orders: Sequence[int]):
        orders = tuple(orders)
        if not orders:
            raise AccountingError("order grid is empty")
        for a in orders:
            if int(a) != a or a < 2:
                raise AccountingError(f"orders must be integers >= 2, got {a!r}")
        orders = tuple(int(a) for a in orders)
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise AccountingError("orders must be strictly increasing")
        return super().__new__(cls, orders)


DEFAULT_ORDERS = OrderGrid(list(range(2, 65)) + [128, 256, 512])


@dataclass(frozen=True)
class RdpCurve:
    orders: OrderGrid
    values: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "orders", OrderGrid(self.orders))
        values = tuple(float(v) for v in self.values)
        if len(values) != len(self.orders):
            raise AccountingError(
                f"{len(values)} RDP values for {len(self.orders)} orders")
        if any(not v >= 0 for v in values):
            raise AccountingError("RDP values must be non-negative")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, orders: Sequence[int] = DEFAULT_ORDERS) -> "RdpCurve":
        return cls(OrderGrid(orders), (0.0,) * len(orders))


def default_delta(dataset_size: int) -> float:
    """min(1e-5, 1/(10 N)) -- keeps delta well below one over the dataset size."""
    if dataset_size <= 0:
        return 1e-5
    return min(1e-5, 1.0 / (10.0 * dataset_size))


def gaussian_sigma_for(spec: GaussianMechanismSpec) -> float:
    """Noise standard deviation of the classical (eps, delta) Gaussian mechanism."""
    return spec.sensitivity * math.sqrt(2.0 * math.log(1.25 / spec.delta)) / spec.epsilon


def rdp_gaussian(sigma: float, order: float) -> float:
    """RDP of one application of the sensitivity-1 Gaussian mechanism."""
    if not sigma > 0:
        raise AccountingError(f"sigma must be > 0, got {sigma!r}")
    if not order > 1:
        raise AccountingError(f"order must be > 1, got {order!r}")
    return order / (2.0 * sigma**2)


def _log_expm1(x: np.ndarray) -> np.ndarray:
    # log(exp(x) - 1) for x > 0 without overflow
    out = np.empty_like(x)
    small = x < 30.0
    out[small] = np.log(np.expm1(x[small]))
    big = ~small
    out[big] = x[big] + np.log1p(-np.exp(-x[big]))
    return out


def rdp_subsampled_gaussian(q: float, sigma: float, order: int) -> float:
    """Per-step RDP of the Poisson-subsampled Gaussian mechanism at an integer order.

    Evaluates A = sum_i C(a,i) (1-q)^(a-i) q^i exp((i^2-i)/(2 sigma^2)) and returns
    log(A)/(a-1). Since the binomial weights sum to one, A - 1 is summed directly
    (terms i >= 2 with expm1 factors, all positive) which keeps full relative
    precision when A is within rounding of 1.
    """
    if not 0.0 <= q <= 1.0:
        raise AccountingError(f"q must lie in [0, 1], got {q!r}")
    if not sigma > 0:
        raise AccountingError(f"sigma must be > 0, got {sigma!r}")
    if int(order) != order or order < 2:
        raise AccountingError(f"order must be an integer >= 2, got {order!r}")
    order = int(order)
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return rdp_gaussian(sigma, order)

    i = np.arange(2, order + 1, dtype=np.float64)
    log_binom = (special.gammaln(order + 1.0) - special.gammaln(i + 1.0)
                 - special.gammaln(order - i + 1.0))
    log_terms = (log_binom + i * math.log(q) + (order - i) * math.log1p(-q)
                 + _log_expm1((i * i - i) / (2.0 * sigma**2)))
    log_am1 = special.logsumexp(log_terms)
    if log_am1 < 0.0:
        log_a = math.log1p(math.exp(log_am1))
    else:
        log_a = log_am1 + math.log1p(math.exp(-log_am1))
    return log_a / (order - 1)


def rdp_curve(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    """Per-step RDP of the subsampled Gaussian over a whole order grid."""
    grid = OrderGrid(orders)
    return RdpCurve(grid, tuple(rdp_subsampled_gaussian(q, sigma, a) for a in grid))


def compose(per_step: RdpCurve, steps: int) -> RdpCurve:
    """Additive RDP composition over `steps` identical steps."""
    if int(steps) != steps or steps < 0:
        raise AccountingError(f"steps must be a non-negative integer, got {steps!r}")
    return RdpCurve(per_step.orders, tuple(v * steps for v in per_step.values))


def rdp_to_eps(curve: RdpCurve, delta: float) -> Tuple[float, int]:
    """Convert an RDP curve to (eps, best_order); ties go to the smallest order."""
    _check_delta(delta)
    if not curve.orders:
        raise AccountingError("order grid is empty")
    orders = np.asarray(curve.orders, dtype=np.float64)
    eps = np.asarray(curve.values) + math.log(1.0 / delta) / (orders - 1.0)
    best = int(np.argmin(eps))
    return float(eps[best]), int(curve.orders[best])


def account(q: float, sigma: float, steps: int, delta: float,
            grid: Sequence[int] = DEFAULT_ORDERS) -> Tuple[float, int]:
    """(eps, best_order) after `steps` subsampled-Gaussian steps."""
    return rdp_to_eps(compose(rdp_curve(q, sigma, grid), steps), delta)


def calibrate_sigma(target_epsilon: float, delta: float, q: float, steps: int,
                    grid: Sequence[int] = DEFAULT_ORDERS,
                    search_bounds: Tuple[float, float] = (1e-3, 1e3),
                    rel_tol: float = 1e-3,
                    max_bounds: Tuple[float, float] = (1e-6, 1e6),
                    max_iter: int = 200) -> float:
    """Smallest-found noise multiplier whose accounted eps is in [target(1-rel_tol), target].

    Bisects in log(sigma). The returned value is always the upper (more private)
    end of the final bracket, so the accounted eps never exceeds the target.
    """
    if not target_epsilon > 0:
        raise AccountingError(f"target_epsilon must be > 0, got {target_epsilon!r}")
    if not 0 < rel_tol < 1:
        raise AccountingError(f"rel_tol must lie in (0, 1), got {rel_tol!r}")
    _check_delta(delta)
    grid = OrderGrid(grid)

    def eps_at(sigma):
        return account(q, sigma, steps, delta, grid)[0]

    floor = target_epsilon * (1.0 - rel_tol)
    lo, hi = search_bounds
    min_lo, max_hi = max_bounds
    eps_hi = eps_at(hi)
    while eps_hi > target_epsilon:
        if hi >= max_hi:
            raise CalibrationInfeasible(
                f"eps at sigma={hi:g} is {eps_hi:.6g} > target {target_epsilon:g}")
        lo, hi = hi, min(hi * 10.0, max_hi)
        eps_hi = eps_at(hi)
    if eps_hi >= floor:
        return hi
    while eps_at(lo) <= target_epsilon:
        if lo <= min_lo:
            raise CalibrationInfeasible(
                f"eps at sigma={lo:g} is {eps_at(lo):.6g} <= target {target_epsilon:g}; "
                "the budget cannot be spent at this sampling rate and step count")
        hi, lo = lo, max(lo / 10.0, min_lo)
        eps_hi = eps_at(hi)
        if eps_hi >= floor:
            return hi

    # invariant: eps(lo) > target >= eps(hi)
    for _ in range(max_iter):
        if eps_hi >= floor:
            return hi
        mid = math.sqrt(lo * hi)
        eps_mid = eps_at(mid)
        if eps_mid > target_epsilon:
            lo = mid
        else:
            hi, eps_hi = mid, eps_mid
    raise CalibrationError(
        f"no convergence after {max_iter} iterations: bracket [{lo:.9g}, {hi:.9g}], "
        f"eps(hi)={eps_hi:.9g}, target={target_epsilon:g}")
