"""RDP accounting for DP-SGD and noise calibration.

Two accountants are available for calibration: integer-order RDP for the
sampled Gaussian mechanism (``"rdp"``) and a privacy loss distribution
accountant (``"pld"``, see :mod:`reroguard.pld`), which is substantially
tighter at small sampling rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from . import pld
from .errors import BracketExhaustedError, InvalidParameterError, UnstableOrderError

DEFAULT_ORDERS = tuple(range(2, 257))
SIGMA_BRACKET = (1e-3, 1e3)
CALIBRATION_RTOL = 1e-3


@dataclass(frozen=True)
class PrivacyParams:
    """The DP-SGD mechanism tuple every computation keys off.

    ``sigma = 0`` is accepted (noise-free runs); the accountants reject it.
    """

    q: float
    sigma: float
    clip_c: float
    steps_t: int
    delta: float

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise InvalidParameterError(f"q must lie in [0, 1], got {self.q}")
        if self.steps_t < 0:
            raise InvalidParameterError(f"steps_t must be >= 0, got {self.steps_t}")
        if not self.sigma >= 0:
            raise InvalidParameterError(f"sigma must be >= 0, got {self.sigma}")
        if not self.clip_c > 0:
            raise InvalidParameterError(f"clip_c must be > 0, got {self.clip_c}")
        if not 0.0 < self.delta < 1.0:
            raise InvalidParameterError(f"delta must lie in (0, 1), got {self.delta}")

    def to_dict(self):
        return {
            "q": self.q,
            "sigma": self.sigma,
            "clip_c": self.clip_c,
            "steps_t": self.steps_t,
            "delta": self.delta,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            q=float(d["q"]),
            sigma=float(d["sigma"]),
            clip_c=float(d["clip_c"]),
            steps_t=int(d["steps_t"]),
            delta=float(d["delta"]),
        )


@dataclass(frozen=True)
class RdpCurve:
    """RDP epsilon at a strictly increasing grid of orders."""

    alphas: tuple
    eps: tuple

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        e = np.asarray(self.eps, dtype=float)
        if a.ndim != 1 or a.shape != e.shape:
            raise InvalidParameterError("alphas and eps must be 1-D and of equal length")
        if np.any(a <= 1.0):
            raise InvalidParameterError("all Renyi orders must be > 1")
        if np.any(np.diff(a) <= 0):
            raise InvalidParameterError("Renyi orders must be strictly increasing")
        if not np.all(np.isfinite(e)) or np.any(e < 0):
            raise InvalidParameterError("RDP epsilons must be finite and non-negative")

    @property
    def points(self):
        return list(zip(self.alphas, self.eps))

    def __len__(self):
        return len(self.alphas)


def _check_orders(alphas):
    alphas = tuple(alphas)
    if not alphas:
        raise InvalidParameterError("order grid is empty")
    return alphas


def rdp_full_batch(steps: int, sigma: float, alphas: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """``alpha * T / (2 sigma^2)`` at each order (full-batch DP-SGD)."""
    alphas = _check_orders(alphas)
    if steps < 0:
        raise InvalidParameterError(f"steps must be >= 0, got {steps}")
    if steps == 0:
        return RdpCurve(alphas, tuple(0.0 for _ in alphas))
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    if math.isinf(sigma):
        return RdpCurve(alphas, tuple(0.0 for _ in alphas))
    return RdpCurve(alphas, tuple(a * steps / (2.0 * sigma * sigma) for a in alphas))


def rdp_subsampled(
    steps: int, sigma: float, q: float, alphas: Sequence[int] = DEFAULT_ORDERS
) -> RdpCurve:
    """Integer-order RDP of ``steps`` rounds of the Poisson-sampled Gaussian.

    Per step, ``eps(a) = log(sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1)/(2 sigma^2))) / (a-1)``,
    evaluated as a log-sum-exp; composition multiplies by ``steps``.
    """
    alphas = _check_orders(alphas)
    if any(int(a) != a or a < 2 for a in alphas):
        raise InvalidParameterError("rdp_subsampled needs integer orders >= 2")
    if not 0.0 <= q <= 1.0:
        raise InvalidParameterError(f"q must lie in [0, 1], got {q}")
    if steps < 0:
        raise InvalidParameterError(f"steps must be >= 0, got {steps}")
    if steps == 0 or q == 0.0:
        return RdpCurve(alphas, tuple(0.0 for _ in alphas))
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    if q == 1.0:
        return rdp_full_batch(steps, sigma, alphas)

    log_q, log_1mq = math.log(q), math.log1p(-q)
    out = []
    for a in alphas:
        a = int(a)
        k = np.arange(a + 1, dtype=float)
        log_binom = gammaln(a + 1) - gammaln(k + 1) - gammaln(a - k + 1)
        with np.errstate(over="ignore", invalid="ignore"):
            terms = log_binom + (a - k) * log_1mq + k * log_q + k * (k - 1) / (2.0 * sigma * sigma)
            per_step = logsumexp(terms) / (a - 1)
        val = steps * per_step
        if not math.isfinite(val):
            usable = [b for b in alphas if b < a]
            raise UnstableOrderError(
                f"RDP at order {a} overflows for sigma={sigma}; "
                f"largest usable order is {usable[-1] if usable else None}",
                usable[-1] if usable else None,
            )
        out.append(max(val, 0.0))
    return RdpCurve(alphas, tuple(out))


def epsilon_from_rdp(curve: RdpCurve, delta: float):
    """Convert an RDP curve to (epsilon, delta)-DP.

    Returns ``(epsilon, best_alpha)`` with
    ``epsilon = min_a eps(a) + log(1/delta) / (a - 1)``.
    """
    if len(curve) == 0:
        raise InvalidParameterError("empty RDP curve")
    if not 0.0 < delta < 1.0:
        raise InvalidParameterError(f"delta must lie in (0, 1), got {delta}")
    a = np.asarray(curve.alphas, dtype=float)
    e = np.asarray(curve.eps, dtype=float) + math.log(1.0 / delta) / (a - 1.0)
    i = int(np.argmin(e))
    return float(e[i]), float(a[i])


def approx_epsilon(q: float, steps: int, delta: float, sigma: float) -> float:
    """Rule-of-thumb ``q * sqrt(T log(1/delta)) / sigma``. Approximate, not a guarantee."""
    if q == 0 or steps == 0:
        return 0.0
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    return q * math.sqrt(steps * math.log(1.0 / delta)) / sigma


def epsilon_for(sigma, delta, q, steps, accountant="rdp", orders=DEFAULT_ORDERS):
    """Epsilon spent by DP-SGD under the chosen accountant."""
    if accountant == "rdp":
        return epsilon_from_rdp(rdp_subsampled(steps, sigma, q, orders), delta)[0]
    if accountant == "pld":
        return pld.epsilon_pld(float(q), float(sigma), int(steps), float(delta))
    raise InvalidParameterError(f"unknown accountant {accountant!r}")


@dataclass(frozen=True)
class Calibration:
    sigma: float
    epsilon: float
    accountant: str
    at_lower_edge: bool = False
    evaluations: int = 0


def calibrate_sigma(
    eps_target: float,
    delta: float,
    q: float,
    steps: int,
    accountant: str = "rdp",
    orders: Sequence[int] = DEFAULT_ORDERS,
    bracket=SIGMA_BRACKET,
    rtol: float = CALIBRATION_RTOL,
) -> Calibration:
    """Smallest-noise sigma whose accounted epsilon lands in ``[eps_target*(1-rtol), eps_target]``.

    Bisection runs in log-sigma over ``bracket``; epsilon is assumed (and
    tested) to be non-increasing in sigma. If even the lower bracket edge
    meets the target, that edge is returned with ``at_lower_edge=True``.
    Raises :class:`BracketExhaustedError` if the upper edge still spends
    more than ``eps_target``.
    """
    if not eps_target > 0:
        raise InvalidParameterError(f"eps_target must be > 0, got {eps_target}")
    if steps <= 0 or q == 0.0:
        raise InvalidParameterError("calibration needs steps > 0 and q > 0")
    lo, hi = bracket
    n_eval = 0
    if accountant == "pld":
        # PLD is never looser than RDP, so the RDP solution caps the search
        rdp_sigma = calibrate_sigma(eps_target, delta, q, steps, "rdp", orders, bracket, rtol).sigma
        lo, hi = max(bracket[0], rdp_sigma / 4.0), min(bracket[1], rdp_sigma * 1.05)

    def eps_at(s):
        nonlocal n_eval
        n_eval += 1
        try:
            return epsilon_for(s, delta, q, steps, accountant, orders)
        except UnstableOrderError:
            return math.inf

    e_lo = eps_at(lo)
    while accountant == "pld" and e_lo <= eps_target and lo > bracket[0]:
        hi, lo = lo, max(bracket[0], lo / 4.0)
        e_lo = eps_at(lo)
    if e_lo <= eps_target:
        return Calibration(lo, e_lo, accountant, at_lower_edge=True, evaluations=n_eval)
    e_hi = eps_at(hi)
    while accountant == "pld" and e_hi > eps_target and hi < bracket[1]:
        lo, e_lo = hi, e_hi
        hi = min(bracket[1], hi * 2.0)
        e_hi = eps_at(hi)
    if e_hi > eps_target:
        raise BracketExhaustedError(
            f"epsilon at sigma={hi} is {e_hi:.6g} > target {eps_target}; "
            f"bracket {bracket} exhausted"
        )
    floor = eps_target * (1.0 - rtol)
    # invariant: eps(lo) > target >= eps(hi)
    for _ in range(200):
        if e_hi >= floor:
            return Calibration(hi, e_hi, accountant, evaluations=n_eval)
        if math.isfinite(e_lo) and hi / lo < 4.0:
            # regula falsi in log-sigma, pulled towards the midpoint for safety
            t = (e_lo - eps_target) / (e_lo - e_hi)
            t = min(max(t, 0.1), 0.9)
            mid = math.exp(math.log(lo) + t * (math.log(hi) - math.log(lo)))
        else:
            mid = math.sqrt(lo * hi)
        e_mid = eps_at(mid)
        if e_mid > eps_target:
            lo, e_lo = mid, e_mid
        else:
            hi, e_hi = mid, e_mid
    raise BracketExhaustedError("calibration did not converge within 200 iterations")
