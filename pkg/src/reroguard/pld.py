"""Privacy loss distribution accounting for Poisson-subsampled Gaussian DP-SGD.

The dominating pair for one step is ``mu = (1-q) N(0, s^2) + q N(1, s^2)``
against ``nu = N(0, s^2)`` (noise multiplier ``s``, sensitivity normalised
to 1). The privacy loss of each direction is a monotone function of the
scalar output, so the loss distribution can be discretised exactly from
Gaussian tail probabilities. Rounding every loss *up* to the next grid
point keeps the result a valid upper bound on epsilon. ``T`` steps are
composed with a single FFT power.
"""

from __future__ import annotations

import functools
import math

import numpy as np
from scipy import fft as sp_fft
from scipy.special import log_ndtr, ndtr

from .errors import InvalidParameterError

DEFAULT_INTERVAL = 1e-3
_TAIL_SIGMAS = 8.5
_MAX_FFT_LEN = 1 << 24
_MAX_STEP_LOSS = 200.0


def _loss(x, q, sigma):
    """ln(mu/nu) at output ``x``."""
    z = (2.0 * x - 1.0) / (2.0 * sigma * sigma)
    if q == 1.0:
        return z
    return np.logaddexp(np.log1p(-q), np.log(q) + z)


def _loss_preimage(loss, q, sigma):
    """Output ``x`` with ``_loss(x) == loss``; -inf below ``ln(1-q)``."""
    loss = np.asarray(loss, dtype=float)
    if q == 1.0:
        return sigma * sigma * loss + 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = loss + np.log1p(-(1.0 - q) * np.exp(-loss))
        x = sigma * sigma * (inner - math.log(q)) + 0.5
    return np.where(loss > math.log1p(-q), x, -np.inf)


def _mixture_sf(x, q, sigma):
    return (1.0 - q) * ndtr(-x / sigma) + q * ndtr(-(x - 1.0) / sigma)


def _single_step_pmf(q, sigma, direction, interval):
    """Pessimistic single-step loss pmf.

    Returns ``(offset, pmf, inf_mass)``; ``pmf[j]`` is the mass at loss
    ``(offset + j) * interval``.
    """
    lo_x = -_TAIL_SIGMAS * sigma
    hi_x = 1.0 + _TAIL_SIGMAS * sigma
    if direction == "remove":
        # loss = L(x), x ~ mu, increasing in x
        l_lo = max(float(_loss(lo_x, q, sigma)), -_MAX_STEP_LOSS)
        l_hi = min(float(_loss(hi_x, q, sigma)), _MAX_STEP_LOSS)
        k_lo = math.floor(l_lo / interval)
        k_hi = math.ceil(l_hi / interval)
        edges = np.arange(k_lo, k_hi + 1) * interval
        xs = _loss_preimage(edges, q, sigma)
        sf = _mixture_sf(xs, q, sigma)
        pmf = np.empty(len(edges))
        # everything with loss <= edges[0] (incl. the lower tail) rounds up to edges[0]
        pmf[0] = 1.0 - sf[0]
        pmf[1:] = sf[:-1] - sf[1:]
        inf_mass = float(sf[-1])
        return k_lo, np.clip(pmf, 0.0, None), inf_mass
    if direction == "add":
        # loss = -L(x), x ~ nu, decreasing in x; bounded above by -ln(1-q)
        l_lo = max(-float(_loss(hi_x, q, sigma)), -_MAX_STEP_LOSS)
        if q == 1.0:
            l_hi = min(-float(_loss(-_TAIL_SIGMAS * sigma, q, sigma)), _MAX_STEP_LOSS)
        else:
            l_hi = -math.log1p(-q)
        k_lo = math.floor(l_lo / interval)
        k_hi = math.ceil(l_hi / interval)
        edges = np.arange(k_lo, k_hi + 1) * interval
        xs = _loss_preimage(-edges, q, sigma)
        # P_nu[loss <= e] = P_nu[x >= x(-e)]
        cdf_loss = ndtr(-xs / sigma)
        pmf = np.empty(len(edges))
        pmf[0] = cdf_loss[0]
        pmf[1:] = cdf_loss[1:] - cdf_loss[:-1]
        inf_mass = float(1.0 - cdf_loss[-1]) if q == 1.0 else 0.0
        return k_lo, np.clip(pmf, 0.0, None), max(inf_mass, 0.0)
    raise InvalidParameterError(f"unknown direction {direction!r}")


def _compose(offset, pmf, inf_mass, steps):
    n_out = steps * (len(pmf) - 1) + 1
    size = sp_fft.next_fast_len(n_out, real=True)
    spectrum = sp_fft.rfft(pmf, size)
    out = sp_fft.irfft(spectrum**steps, size)[:n_out]
    out = np.clip(out, 0.0, None)
    total_inf = -math.expm1(steps * math.log1p(-inf_mass)) if inf_mass < 1.0 else 1.0
    return steps * offset, out, total_inf


def _epsilon_from_pmf(offset, pmf, inf_mass, interval, delta):
    if inf_mass >= delta:
        return math.inf
    losses = (offset + np.arange(len(pmf))) * interval
    keep = losses > 0.0
    losses, masses = losses[keep], pmf[keep]
    if len(losses) == 0:
        return 0.0
    # suffix sums over losses >= losses[j]
    s1 = np.cumsum(masses[::-1])[::-1]
    with np.errstate(under="ignore"):
        s2 = np.cumsum((masses * np.exp(-losses))[::-1])[::-1]
    s1 = np.append(s1, 0.0)
    s2 = np.append(s2, 0.0)
    target = delta - inf_mass
    # delta(eps) at eps = losses[j] uses the suffix strictly above j
    with np.errstate(divide="ignore"):
        d_at_grid = s1[1:] - np.exp(losses + np.log(s2[1:]))
    if s1[0] - s2[0] <= target:
        return 0.0
    j = int(np.argmax(d_at_grid <= target))
    if d_at_grid[j] > target:
        return math.inf
    lower = losses[j - 1] if j > 0 else 0.0
    if s2[j] <= 0.0:
        return float(losses[j])
    eps = math.log((s1[j] - target) / s2[j])
    return float(min(max(eps, lower), losses[j]))


def _delta_from_pmf(offset, pmf, inf_mass, interval, eps):
    losses = (offset + np.arange(len(pmf))) * interval
    keep = losses > eps
    with np.errstate(under="ignore"):
        return float(np.sum(pmf[keep] * -np.expm1(eps - losses[keep])) + inf_mass)


def _composed(q, sigma, steps, direction, interval):
    offset, pmf, inf_mass = _single_step_pmf(q, sigma, direction, interval)
    while steps * len(pmf) > _MAX_FFT_LEN:
        interval *= 2.0
        offset, pmf, inf_mass = _single_step_pmf(q, sigma, direction, interval)
    return _compose(offset, pmf, inf_mass, steps), interval


def _check(q, sigma, steps):
    if not 0.0 <= q <= 1.0:
        raise InvalidParameterError(f"q must lie in [0, 1], got {q}")
    if steps < 0:
        raise InvalidParameterError(f"steps must be >= 0, got {steps}")
    if steps > 0 and q > 0 and not sigma > 0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")


@functools.lru_cache(maxsize=512)
def epsilon_pld(q, sigma, steps, delta, interval=DEFAULT_INTERVAL):
    """Upper bound on epsilon for ``steps`` rounds of subsampled Gaussian DP-SGD.

    Takes the worse of the add and remove directions.
    """
    _check(q, sigma, steps)
    if not 0.0 < delta < 1.0:
        raise InvalidParameterError(f"delta must lie in (0, 1), got {delta}")
    if steps == 0 or q == 0.0:
        return 0.0
    eps = 0.0
    for direction in ("remove", "add"):
        (offset, pmf, inf_mass), used = _composed(q, sigma, steps, direction, interval)
        eps = max(eps, _epsilon_from_pmf(offset, pmf, inf_mass, used, delta))
    return eps


def delta_pld(q, sigma, steps, eps, interval=DEFAULT_INTERVAL):
    """Upper bound on delta at a given epsilon (worse direction)."""
    _check(q, sigma, steps)
    if steps == 0 or q == 0.0:
        return 0.0
    out = 0.0
    for direction in ("remove", "add"):
        (offset, pmf, inf_mass), used = _composed(q, sigma, steps, direction, interval)
        out = max(out, _delta_from_pmf(offset, pmf, inf_mass, used, eps))
    return min(out, 1.0)


def gaussian_delta(mu, eps):
    """Exact delta(eps) of a Gaussian mechanism with sensitivity/noise ratio ``mu``."""
    if mu == 0:
        return 0.0
    a = log_ndtr(-eps / mu + mu / 2.0)
    b = eps + log_ndtr(-eps / mu - mu / 2.0)
    return float(np.exp(a) - np.exp(b))
