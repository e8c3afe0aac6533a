"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Single-step Renyi divergences are computed on an integer order grid via the
binomial expansion (each term in log space), composed linearly over steps,
and converted with eps = rdp(alpha) + ln(1/delta)/(alpha - 1). This is an
upper bound, i.e. the safe direction relative to tighter accountants.

Shuffle-mode runs reuse the same numbers but every artifact must carry the
caveat from guarantee_label: shuffling's true guarantee is weaker and not
quantified here.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

__all__ = [
    "DEFAULT_ORDERS",
    "PrivacySpec",
    "RdpCurve",
    "AccountantError",
    "rdp_single_step",
    "compose",
    "to_epsilon",
    "calibrate_sigma",
    "guarantee_label",
]

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256)

SIGMA_BRACKET = (0.3, 1e6)

POISSON_LABEL = "(epsilon, delta) as accounted under Poisson subsampling"
SHUFFLE_LABEL = (
    "reported epsilon assumes Poisson amplification; "
    "actual shuffle guarantee is weaker/unquantified"
)


class AccountantError(ValueError):
    pass


@dataclass(frozen=True)
class RdpCurve:
    """Renyi divergence bound per integer order alpha."""

    orders: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise AccountantError("orders and values length mismatch")
        if np.any(np.asarray(self.values) < 0):
            raise AccountantError("Renyi divergences must be nonnegative")


@dataclass
class PrivacySpec:
    """Privacy target and mechanism parameters for one training run."""

    target_epsilon: float  # math.inf means non-private
    delta: float
    q: float
    steps: int
    clip_c: float = 1.0
    sigma: float = 0.0

    def __post_init__(self):
        if not (0 < self.delta < 1):
            raise AccountantError(f"delta must be in (0, 1), got {self.delta}")
        if not (0 < self.q <= 1):
            raise AccountantError(f"sampling rate q must be in (0, 1], got {self.q}")
        if self.steps < 0:
            raise AccountantError("step count must be nonnegative")
        if self.clip_c <= 0:
            raise AccountantError("clipping constant must be positive")

    @property
    def non_private(self) -> bool:
        return math.isinf(self.target_epsilon)

    def warn_if_delta_large(self, n: int) -> None:
        # delta should stay well below 1/N; enforced softly as delta <= 1/(10N)
        if self.delta > 1.0 / (10 * n):
            warnings.warn(
                f"delta={self.delta} exceeds 1/(10*N)={1.0 / (10 * n):.3g}; "
                "the guarantee is weaker than recommended",
                stacklevel=2,
            )


def _validate_orders(orders) -> tuple[int, ...]:
    out = tuple(int(a) for a in orders)
    if not out:
        raise AccountantError("order grid is empty")
    if any(a < 2 or a != float(a_raw) for a, a_raw in zip(out, orders)):
        raise AccountantError("orders must be integers >= 2")
    return out


def rdp_single_step(q: float, sigma: float, orders=DEFAULT_ORDERS) -> RdpCurve:
    """One step of the subsampled Gaussian mechanism on an integer grid.

    q = 1 reduces exactly to the Gaussian mechanism, alpha / (2 sigma^2);
    q < 1 uses the binomial expansion
        rdp(a) = log( sum_j C(a,j) (1-q)^(a-j) q^j e^{j(j-1)/(2 sigma^2)} ) / (a-1)
    with every term evaluated in log space.
    """
    orders = _validate_orders(orders)
    if not (0 < q <= 1):
        raise AccountantError(f"sampling rate q must be in (0, 1], got {q}")
    if sigma < 0:
        raise AccountantError("sigma must be nonnegative")
    if sigma == 0:
        # no noise: unbounded divergence, converts to epsilon = inf
        return RdpCurve(orders, np.full(len(orders), math.inf))
    if q == 1.0:
        values = np.array([a / (2.0 * sigma * sigma) for a in orders])
        return RdpCurve(orders, values)
    log_q = math.log(q)
    log_1mq = math.log1p(-q)
    values = np.empty(len(orders))
    for i, a in enumerate(orders):
        j = np.arange(a + 1)
        log_binom = gammaln(a + 1) - gammaln(j + 1) - gammaln(a - j + 1)
        log_terms = log_binom + j * log_q + (a - j) * log_1mq + j * (j - 1) / (2.0 * sigma * sigma)
        values[i] = logsumexp(log_terms) / (a - 1)
    # tiny negative values can appear from rounding at q -> 0; clamp
    return RdpCurve(orders, np.maximum(values, 0.0))


def compose(curve: RdpCurve, steps: int) -> RdpCurve:
    """T-fold composition: Renyi divergences add linearly."""
    if steps < 0:
        raise AccountantError("step count must be nonnegative")
    return RdpCurve(curve.orders, curve.values * steps)


def to_epsilon(curve: RdpCurve, delta: float) -> tuple[float, int]:
    """(epsilon, minimizing order) via eps = rdp(a) + ln(1/delta)/(a-1)."""
    if not (0 < delta < 1):
        raise AccountantError(f"delta must be in (0, 1), got {delta}")
    if len(curve.orders) == 0:
        raise AccountantError("empty curve")
    log_inv_delta = math.log(1.0 / delta)
    candidates = curve.values + log_inv_delta / (np.asarray(curve.orders) - 1.0)
    best = int(np.argmin(candidates))
    return float(candidates[best]), curve.orders[best]


def epsilon_of(q: float, sigma: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> tuple[float, int]:
    """Forward accountant: epsilon after `steps` compositions."""
    return to_epsilon(compose(rdp_single_step(q, sigma, orders), steps), delta)


def calibrate_sigma(
    target_epsilon: float,
    delta: float,
    q: float,
    steps: int,
    orders=DEFAULT_ORDERS,
    rel_tol: float = 1e-3,
) -> float:
    """Smallest noise multiplier meeting the budget, by bisection on sigma.

    Searches sigma in SIGMA_BRACKET to relative tolerance rel_tol and returns
    a value whose forward epsilon is <= target_epsilon.
    """
    if not (0 < target_epsilon < math.inf):
        raise AccountantError("target epsilon must be finite and positive")
    lo, hi = SIGMA_BRACKET

    def eps_at(sigma: float) -> float:
        return epsilon_of(q, sigma, steps, delta, orders)[0]

    if eps_at(hi) > target_epsilon:
        raise AccountantError(
            f"target epsilon {target_epsilon} unreachable for sigma in "
            f"[{lo}, {hi}] at q={q}, T={steps}, delta={delta}"
        )
    if eps_at(lo) <= target_epsilon:
        return lo
    while hi / lo > 1.0 + rel_tol:
        mid = math.sqrt(lo * hi)
        if eps_at(mid) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def guarantee_label(method: str) -> str:
    """Text that must accompany every metrics artifact of a private run."""
    if method == "poisson":
        return POISSON_LABEL
    if method == "shuffle":
        return SHUFFLE_LABEL
    raise AccountantError(f"unknown iteration method {method!r}")
