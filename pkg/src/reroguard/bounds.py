"""Reconstruction-robustness bounds for DP-SGD.

``kappa`` is the prior probability of reconstruction (best success without
observing the mechanism) and ``gamma`` the post-observation bound. The
sharp bound is the blow-up function of the Gaussian mixture
``mu_{T,s,q} = sum_w P[Bern(q)^T = w] N(w, s^2 I)`` against
``nu_{T,s} = N(0, s^2 I)``, estimated here by Monte Carlo. The RDP-based
bounds are kept for comparison.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm

from .accountant import RdpCurve
from .errors import InvalidParameterError

DEFAULT_SAMPLES = 1_000_000
DEFAULT_BOOTSTRAP = 100
_BLOCK_ELEMENTS = 1 << 22

RHO_EXACT = "exact"
RHO_SQL2 = "sql2"


@dataclass(frozen=True)
class PriorSpec:
    """Discrete prior over candidate targets.

    ``rho`` is ``"exact"`` (indicator of inequality) or ``"sql2"`` (squared
    L2 distance); reconstruction succeeds when ``rho <= eta``. ``labels``
    are optional class labels for classification data.
    """

    candidates: np.ndarray
    rho: str = RHO_EXACT
    eta: float = 0.0
    weights: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        cand = np.atleast_2d(np.asarray(self.candidates, dtype=float))
        object.__setattr__(self, "candidates", cand)
        if len(cand) < 1:
            raise InvalidParameterError("prior must contain at least one candidate")
        if self.rho not in (RHO_EXACT, RHO_SQL2):
            raise InvalidParameterError(f"unknown error function {self.rho!r}")
        if self.eta < 0:
            raise InvalidParameterError(f"eta must be >= 0, got {self.eta}")
        if self.rho == RHO_EXACT and self.eta >= 1:
            raise InvalidParameterError("exact-match rho requires eta < 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (len(cand),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise InvalidParameterError("weights must be non-negative, one per candidate, summing to 1")
            object.__setattr__(self, "weights", w)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=int)
            if lab.shape != (len(cand),):
                raise InvalidParameterError("need exactly one label per candidate")
            object.__setattr__(self, "labels", lab)

    @property
    def n(self):
        return len(self.candidates)

    @property
    def probabilities(self):
        if self.weights is None:
            return np.full(self.n, 1.0 / self.n)
        return self.weights


@dataclass(frozen=True)
class BoundEstimate:
    gamma: float
    kappa: float
    method: str
    n_samples: int = 0
    std_err: float = 0.0
    seed: Optional[int] = None
    details: dict = field(default_factory=dict, compare=False)


# ---------------------------------------------------------------- kappa


def kappa_discrete(prior: PriorSpec) -> float:
    """Largest prior mass inside one rho-ball of radius eta.

    For squared L2 only balls centred on candidates are searched, which
    gives a lower bound on the true supremum (exact for ``"exact"``).
    """
    if not isinstance(prior, PriorSpec):
        raise InvalidParameterError("kappa_discrete expects a PriorSpec")
    p = prior.probabilities
    if prior.rho == RHO_EXACT:
        _, inverse = np.unique(prior.candidates, axis=0, return_inverse=True)
        return min(1.0, float(np.bincount(inverse.ravel(), weights=p).max()))
    x = prior.candidates
    best = 0.0
    chunk = max(1, (1 << 22) // max(1, len(x) * x.shape[1]))
    for start in range(0, len(x), chunk):
        c = x[start : start + chunk]
        d2 = ((c[:, None, :] - x[None, :, :]) ** 2).sum(-1)
        best = max(best, float(((d2 <= prior.eta) * p).sum(1).max()))
    return min(1.0, best)


@dataclass(frozen=True)
class KappaSampleEstimate:
    kappa_hat: float
    kappa_upper: float
    confidence: float
    n_samples: int
    # confidence uses kappa_hat in place of the unknown kappa
    plug_in: bool = True


def kappa_upper_bound(kappa_hat: float, n_samples: int, tau: float):
    """``(kappa_hat / (1 - tau), 1 - exp(-N tau^2 kappa_hat / 2))``."""
    if n_samples < 1:
        raise InvalidParameterError("need at least one sample")
    if not 0 < tau < 1:
        raise InvalidParameterError(f"tau must lie in (0, 1), got {tau}")
    upper = min(1.0, kappa_hat / (1.0 - tau))
    confidence = -math.expm1(-n_samples * tau * tau * kappa_hat / 2.0)
    return upper, confidence


def kappa_from_samples(
    sample_source: Callable[[np.random.Generator, int], np.ndarray],
    n_samples: int,
    tau: float,
    rho: str = RHO_EXACT,
    eta: float = 0.0,
    seed: int = 0,
) -> KappaSampleEstimate:
    """Estimate kappa from ``n_samples`` draws of ``sample_source(rng, n)``."""
    if n_samples < 1:
        raise InvalidParameterError("need at least one sample")
    rng = np.random.default_rng(seed)
    draws = np.asarray(sample_source(rng, n_samples), dtype=float).reshape(n_samples, -1)
    k_hat = kappa_discrete(PriorSpec(draws, rho=rho, eta=eta))
    upper, confidence = kappa_upper_bound(k_hat, n_samples, tau)
    return KappaSampleEstimate(k_hat, upper, confidence, n_samples)


# ---------------------------------------------------------------- gamma


def log_mixture_ratio(w, q: float, sigma: float):
    """``log(mu_{T,s,q}(w) / nu_{T,s}(w))`` summed over the last axis.

    The mixture density factorises per coordinate, so no 2^T sum is formed.
    """
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    w = np.asarray(w, dtype=float)
    x = (2.0 * w - 1.0) / (2.0 * sigma * sigma)
    if q == 1.0:
        return x.sum(-1)
    if q == 0.0:
        return np.zeros(w.shape[:-1])
    # log(1 - q + q e^x), overflow-safe branch for large x
    with np.errstate(over="ignore"):
        small = np.log1p(q * np.expm1(np.minimum(x, 700.0)))
    big = np.logaddexp(math.log1p(-q), math.log(q) + x)
    return np.where(x < 30.0, small, big).sum(-1)


def _threads():
    try:
        return max(1, int(os.environ.get("RERO_THREADS", "1")))
    except ValueError:
        return 1


def _sample_log_ratios(n, q, sigma, steps, from_mu, seed_seq, threads):
    """Log ratios of ``n`` draws from nu (or mu if ``from_mu``)."""
    if q == 1.0:
        # the ratio depends on w only through sum(w) ~ N(T*[from_mu], T s^2)
        rng = np.random.default_rng(seed_seq)
        total = rng.standard_normal(n) * (sigma * math.sqrt(steps))
        if from_mu:
            total += steps
        return (2.0 * total - steps) / (2.0 * sigma * sigma)

    rows = max(1, _BLOCK_ELEMENTS // max(steps, 1))
    starts = list(range(0, n, rows))
    children = seed_seq.spawn(len(starts))

    def block(i):
        m = min(rows, n - starts[i])
        rng = np.random.default_rng(children[i])
        w = rng.standard_normal((m, steps)) * sigma
        if from_mu:
            w += rng.random((m, steps)) < q
        return log_mixture_ratio(w, q, sigma)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(block, range(len(starts))))
    else:
        parts = [block(i) for i in range(len(starts))]
    return np.concatenate(parts) if parts else np.empty(0)


def _top_mass(order_nu_w, order_mu_w, budget):
    """mu-mass of the top-ratio prefix whose nu-mass equals ``budget``.

    The boundary sample enters fractionally, so the event has nu-mass
    exactly ``budget`` (a randomised likelihood-ratio test).
    """
    cum_nu = np.cumsum(order_nu_w)
    j = int(np.searchsorted(cum_nu, budget, side="left"))
    if j >= len(cum_nu):
        return float(order_mu_w.sum())
    before = cum_nu[j - 1] if j > 0 else 0.0
    frac = (budget - before) / order_nu_w[j] if order_nu_w[j] > 0 else 0.0
    return float(order_mu_w[:j].sum() + frac * order_mu_w[j])


def estimate_gamma(
    kappa: float,
    q: float,
    sigma: float,
    steps: int,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    proposal: str = "mixture",
    n_bootstrap: int = DEFAULT_BOOTSTRAP,
    threads: Optional[int] = None,
) -> BoundEstimate:
    """Monte Carlo estimate of the blow-up bound ``B_kappa(mu_{T,s,q}, nu_{T,s})``.

    Samples are ranked by the likelihood ratio ``r = mu/nu``; the event is
    the top-ranked set with nu-mass ``kappa`` and the estimate is its
    mu-mass, normalised by ``n_samples``.

    ``proposal="nu"`` draws every sample from nu, keeps the
    ``ceil(kappa N)`` largest ratios and returns ``sum(r) / N``. Its
    variance grows like ``exp(T / sigma^2)``, so the default draws half the
    samples from nu and half from mu and weights them by ``nu/rho`` and
    ``mu/rho`` for ``rho = (mu + nu) / 2``; both weights are bounded by 2.

    ``std_err`` comes from a Poisson bootstrap over samples with
    ``n_bootstrap`` replicates (0 disables it). Sampling is split into
    blocks with independent seed streams, so results depend only on
    ``seed``, not on ``RERO_THREADS``.
    """
    if not 0 < kappa <= 1:
        raise InvalidParameterError(f"kappa must lie in (0, 1], got {kappa}")
    if not 0 <= q <= 1:
        raise InvalidParameterError(f"q must lie in [0, 1], got {q}")
    if steps < 0:
        raise InvalidParameterError(f"steps must be >= 0, got {steps}")
    if n_samples * kappa < 1:
        raise InvalidParameterError(f"n_samples={n_samples} < 1/kappa retains no sample")
    if proposal not in ("mixture", "nu"):
        raise InvalidParameterError(f"unknown proposal {proposal!r}")
    details = {"proposal": proposal}
    if steps == 0 or q == 0.0 or math.isinf(sigma):
        return BoundEstimate(kappa, kappa, "mc_blowup", n_samples, 0.0, seed, details)
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    threads = _threads() if threads is None else threads

    root = np.random.SeedSequence(seed)
    nu_seq, mu_seq, boot_seq = root.spawn(3)
    if proposal == "nu":
        log_r = _sample_log_ratios(n_samples, q, sigma, steps, False, nu_seq, threads)
        nu_w = np.ones(n_samples)
        with np.errstate(over="ignore"):
            mu_w = np.exp(log_r)
    else:
        half = n_samples // 2
        log_r = np.concatenate(
            [
                _sample_log_ratios(half, q, sigma, steps, False, nu_seq, threads),
                _sample_log_ratios(n_samples - half, q, sigma, steps, True, mu_seq, threads),
            ]
        )
        # nu/rho = 2/(1+r), mu/rho = 2r/(1+r)
        nu_w = 2.0 * np.exp(-np.logaddexp(0.0, log_r))
        mu_w = 2.0 * np.exp(-np.logaddexp(0.0, -log_r))

    order = np.argsort(-log_r, kind="stable")
    nu_sorted, mu_sorted = nu_w[order], mu_w[order]
    budget = kappa * n_samples
    if proposal == "nu":
        n_keep = math.ceil(budget)
        raw = float(mu_sorted[:n_keep].sum()) / n_samples
        details["retained"] = n_keep
    else:
        raw = _top_mass(nu_sorted, mu_sorted, budget) / n_samples

    std_err = 0.0
    if n_bootstrap > 0:
        std_err = _bootstrap_std(nu_sorted, mu_sorted, kappa, proposal, n_bootstrap, boot_seq)
    details["raw_gamma"] = raw
    gamma = min(1.0, max(kappa, raw))
    return BoundEstimate(gamma, kappa, "mc_blowup", n_samples, std_err, seed, details)


def _bootstrap_std(nu_sorted, mu_sorted, kappa, proposal, n_boot, seed_seq):
    n = len(nu_sorted)
    # only a prefix of the ranking can ever enter a resampled event
    cum = np.cumsum(nu_sorted)
    slack = 12.0 * math.sqrt(kappa * n * 2.0) + 16.0
    prefix = min(n, int(np.searchsorted(cum, kappa * n + slack)) + 1)
    nu_p, mu_p = nu_sorted[:prefix], mu_sorted[:prefix]
    rng = np.random.default_rng(seed_seq)
    reps = np.empty(n_boot)
    for b in range(n_boot):
        counts = rng.poisson(1.0, prefix).astype(float)
        total = counts.sum() + rng.poisson(n - prefix)
        budget = kappa * total
        if proposal == "nu":
            cum_c = np.cumsum(counts)
            j = int(np.searchsorted(cum_c, math.ceil(budget), side="left"))
            reps[b] = float((counts[: j + 1] * mu_p[: j + 1]).sum()) / total
        else:
            reps[b] = _top_mass(counts * nu_p, counts * mu_p, budget) / total
    return float(reps.std(ddof=1))


def gamma_closed_form_fullbatch(kappa: float, steps: int, sigma: float) -> BoundEstimate:
    """Exact full-batch bound ``Phi(Phi^-1(kappa) + sqrt(T)/sigma)``.

    At q=1 the two distributions are unit-separated Gaussians along the
    all-ones direction and the optimal event is a half-space.
    """
    if not 0 < kappa <= 1:
        raise InvalidParameterError(f"kappa must lie in (0, 1], got {kappa}")
    if steps < 0 or not sigma > 0:
        raise InvalidParameterError("need steps >= 0 and sigma > 0")
    gamma = float(norm.cdf(norm.ppf(kappa) + math.sqrt(steps) / sigma))
    return BoundEstimate(max(gamma, kappa), kappa, "closed_form_fullbatch")


def rero_from_rdp(kappa: float, curve: RdpCurve) -> BoundEstimate:
    """``min_a (kappa e^eps(a))^((a-1)/a)``, capped at 1."""
    if not 0 < kappa <= 1:
        raise InvalidParameterError(f"kappa must lie in (0, 1], got {kappa}")
    a = np.asarray(curve.alphas, dtype=float)
    e = np.asarray(curve.eps, dtype=float)
    log_gamma = (a - 1.0) / a * (math.log(kappa) + e)
    i = int(np.argmin(log_gamma))
    gamma = math.exp(min(float(log_gamma[i]), 0.0))
    return BoundEstimate(gamma, kappa, "rdp_general", details={"alpha": float(a[i])})


def rero_fullbatch_rdp_closed(kappa: float, steps: int, sigma: float) -> BoundEstimate:
    """RDP-based full-batch bound optimised over all orders in closed form."""
    if not 0 < kappa <= 1:
        raise InvalidParameterError(f"kappa must lie in (0, 1], got {kappa}")
    if steps < 0 or not sigma > 0:
        raise InvalidParameterError("need steps >= 0 and sigma > 0")
    gap = max(0.0, math.sqrt(math.log(1.0 / kappa)) - math.sqrt(steps / (2.0 * sigma * sigma)))
    return BoundEstimate(math.exp(-gap * gap), kappa, "rdp_eq5")


def guo_mse_lower_bound(epsilon: float, diameters=None, d: Optional[int] = None) -> float:
    """MSE lower bound ``sum(diam_i^2) / (4 d (e^eps - 1))`` for (2, eps)-RDP mechanisms.

    Defaults to the unit cube, giving ``1 / (4 (e^eps - 1))``. Returns
    ``math.inf`` at ``epsilon == 0``.
    """
    if epsilon < 0:
        raise InvalidParameterError(f"epsilon must be >= 0, got {epsilon}")
    if diameters is None:
        mean_sq = 1.0
    else:
        diam = np.asarray(diameters, dtype=float).ravel()
        if d is None:
            d = len(diam)
        mean_sq = float((diam**2).sum()) / d
    if epsilon == 0:
        return math.inf
    if math.isinf(epsilon):
        return 0.0
    with np.errstate(over="ignore"):
        return mean_sq / (4.0 * float(np.expm1(epsilon)))
