"""Reconstruction attacks on DP-SGD transcripts.

The discrete-prior attacks only ever need, per candidate ``z`` and step
``t``, the inner product ``<clip(grad_z), residual_t>`` and the squared
norm ``|clip(grad_z)|^2``, both in units of ``C^2``. :class:`ScoreStreams`
holds those arrays; they come from :func:`candidate_streams` for a real
transcript or from the idealized simulator in :mod:`reroguard.harness`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bounds import PriorSpec
from .errors import InvalidParameterError
from .mlp import MlpModel, clip

SUBTRACTION_MODES = ("exact", "expected")
_STEP_CHUNK_ELEMENTS = 1 << 23


@dataclass(frozen=True)
class ResidualGradients:
    """Privatized gradients with the known points' contribution removed."""

    residuals: np.ndarray
    subtraction_enabled: bool = True
    mode: str = "exact"

    @property
    def norms(self):
        return np.linalg.norm(self.residuals, axis=1)

    def __len__(self):
        return len(self.residuals)


def _step_chunks(steps, per_step):
    size = max(1, _STEP_CHUNK_ELEMENTS // max(1, per_step))
    for start in range(0, steps, size):
        yield slice(start, min(steps, start + size))


def subtract_known(
    transcript,
    known_points,
    known_labels,
    enabled: bool = True,
    mode: str = "exact",
) -> ResidualGradients:
    """Remove the known points' clipped gradients from every privatized gradient.

    ``mode="exact"`` uses the transcript's membership record for the known
    rows (first ``len(known_points)`` columns); ``"expected"`` subtracts
    ``q`` times every known gradient instead.
    """
    if mode not in SUBTRACTION_MODES:
        raise InvalidParameterError(f"unknown subtraction mode {mode!r}")
    grads = np.asarray(transcript.grads, dtype=float)
    if not enabled:
        return ResidualGradients(grads.copy(), False, mode)
    x = np.asarray(known_points, dtype=float)
    y = np.asarray(known_labels, dtype=int)
    if len(x) == 0:
        return ResidualGradients(grads.copy(), True, mode)
    model, c = transcript.model, transcript.params.clip_c
    m = len(x)
    out = grads.copy()
    for sl in _step_chunks(len(grads), m * model.n_params):
        thetas = transcript.thetas[sl]
        k = len(thetas)
        g = clip(model.per_example_grads(thetas, np.broadcast_to(x, (k, *x.shape)), np.broadcast_to(y, (k, m))), c)
        if mode == "exact":
            weights = transcript.membership[sl, :m].astype(float)
        else:
            weights = np.full((k, m), transcript.params.q)
        out[sl] -= np.einsum("tm,tmp->tp", weights, g)
    return ResidualGradients(out, True, mode)


@dataclass(frozen=True)
class ScoreStreams:
    """Per-candidate, per-step statistics in units of ``C^2``.

    ``inner[i, t] = <clip(grad z_i), residual_t> / C^2``,
    ``sq_norms[i, t] = |clip(grad z_i)|^2 / C^2`` and
    ``residual_sq[t] = |residual_t|^2 / C^2``.
    """

    inner: np.ndarray
    sq_norms: np.ndarray
    residual_sq: Optional[np.ndarray] = None

    def __post_init__(self):
        inner = np.atleast_2d(np.asarray(self.inner, dtype=float))
        sq = np.broadcast_to(np.asarray(self.sq_norms, dtype=float), inner.shape)
        object.__setattr__(self, "inner", inner)
        object.__setattr__(self, "sq_norms", sq)
        if inner.shape[0] < 1:
            raise InvalidParameterError("empty prior")

    @property
    def n(self):
        return self.inner.shape[0]

    @property
    def steps(self):
        return self.inner.shape[1]


def candidate_streams(
    residuals: ResidualGradients, thetas, model: MlpModel, prior: PriorSpec, c: float
) -> ScoreStreams:
    """Score streams for every prior candidate against a real transcript."""
    if prior.labels is None:
        raise InvalidParameterError("classification prior needs labels")
    thetas = np.asarray(thetas, dtype=float)
    res = residuals.residuals
    if len(thetas) != len(res):
        raise InvalidParameterError("thetas and residuals differ in length")
    x, y = prior.candidates, prior.labels
    n = len(x)
    inner = np.empty((n, len(res)))
    sq = np.empty((n, len(res)))
    for sl in _step_chunks(len(res), n * model.n_params):
        k = sl.stop - sl.start
        g = clip(model.per_example_grads(thetas[sl], np.broadcast_to(x, (k, *x.shape)), np.broadcast_to(y, (k, n))), c)
        inner[:, sl] = np.einsum("tnp,tp->nt", g, res[sl]) / (c * c)
        sq[:, sl] = (g * g).sum(-1).T / (c * c)
    return ScoreStreams(inner, sq, (res * res).sum(1) / (c * c))


@dataclass(frozen=True)
class AttackResult:
    scores: np.ndarray
    guess_index: int
    attack: str
    target_index: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def success(self):
        return self.target_index is not None and self.guess_index == self.target_index

    def to_json(self):
        return json.dumps(
            {
                "attack": self.attack,
                "guess_index": self.guess_index,
                "target_index": self.target_index,
                "success": self.success,
                "scores": [float(s) for s in self.scores],
                "meta": self.meta,
            },
            sort_keys=True,
        )


def _result(scores, attack, target_index, **meta):
    scores = np.asarray(scores, dtype=float)
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return AttackResult(scores, int(np.argmax(scores)), attack, target_index, meta)


def prior_aware_attack(streams: ScoreStreams, target_index: Optional[int] = None) -> AttackResult:
    """Pick the candidate whose clipped gradients best align with the residuals."""
    return _result(streams.inner.sum(1), "prior_aware", target_index, normalized_by="C^2")


def improved_prior_aware_attack(streams: ScoreStreams, q: float, target_index: Optional[int] = None) -> AttackResult:
    """As :func:`prior_aware_attack`, summing only each candidate's ``ceil(qT)`` largest steps."""
    if not 0 < q <= 1:
        raise InvalidParameterError(f"q must lie in (0, 1], got {q}")
    top = math.ceil(q * streams.steps - 1e-9)
    if top == 0:
        raise InvalidParameterError("ceil(q T) = 0 leaves no step to score")
    if top >= streams.steps:
        scores = streams.inner.sum(1)
    else:
        scores = np.partition(streams.inner, streams.steps - top, axis=1)[:, -top:].sum(1)
    return _result(scores, "improved_prior_aware", target_index, top_steps=top, normalized_by="C^2")


def likelihood_scores(streams: ScoreStreams, sigma: float, q: float, weights=None):
    """Log-likelihood of each candidate being the target.

    Per step the candidate explains the residual with likelihood ratio
    ``1 - q + q exp((|r|^2 - |r - g_z|^2) / (2 sigma^2 C^2))``; in ``C^2``
    units the exponent is ``(2 <g_z, r> - |g_z|^2) / (2 sigma^2)``.
    """
    if not 0 < q <= 1:
        raise InvalidParameterError(f"q must lie in (0, 1], got {q}")
    if sigma < 0:
        raise InvalidParameterError(f"sigma must be >= 0, got {sigma}")
    gain = 2.0 * streams.inner - streams.sq_norms
    if sigma == 0:
        if streams.residual_sq is None:
            raise InvalidParameterError("sigma=0 needs residual norms for exact matching")
        # |r - g_z|^2 = |r|^2 - gain; a step fits if that is ~0 or r itself is ~0
        mismatch = streams.residual_sq[None, :] - gain
        tol = 1e-9 * (1.0 + streams.residual_sq[None, :])
        fits = np.abs(mismatch) <= tol
        if q < 1:
            fits |= streams.residual_sq[None, :] <= 1e-18
        scores = -(~fits).sum(1).astype(float)
    else:
        log_terms = np.logaddexp(math.log1p(-q) if q < 1 else -np.inf, math.log(q) + gain / (2.0 * sigma * sigma))
        scores = log_terms.sum(1)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape != (streams.n,):
            raise InvalidParameterError("need one weight per candidate")
        with np.errstate(divide="ignore"):
            scores = scores + np.log(w)
    return scores


def likelihood_attack(
    streams: ScoreStreams, sigma: float, q: float, weights=None, target_index: Optional[int] = None
) -> AttackResult:
    """Maximum a-posteriori candidate under the subsampled Gaussian model."""
    scores = likelihood_scores(streams, sigma, q, weights)
    return _result(scores, "likelihood", target_index, exact_match=sigma == 0)


# ------------------------------------------------------- gradient inversion


@dataclass(frozen=True)
class OptConfig:
    iterations: int = 5000
    restarts: int = 5
    lr: float = 0.1
    lr_decay: float = 0.999
    fd_step: float = 1e-4
    init_scale: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class ReconResult:
    z_hat: Optional[np.ndarray]
    loss: float
    failed: bool
    restarts_run: int


def recon_loss(z, residuals: ResidualGradients, thetas, model: MlpModel, label: int, c: float):
    """``sum_t |clip(grad z) - r_t|_1 - <clip(grad z), r_t>`` (in ``C`` units)."""
    return _recon_losses(np.asarray(z, dtype=float)[None, :], residuals.residuals, thetas, model, label, c)[0]


def _recon_losses(zs, res, thetas, model, label, c):
    """Loss at each row of ``zs`` (shape (k, d))."""
    thetas = np.asarray(thetas, dtype=float)
    k = len(zs)
    total = np.zeros(k)
    labels = np.full(k, label)
    for sl in _step_chunks(len(res), k * model.n_params):
        s = sl.stop - sl.start
        g = clip(model.per_example_grads(thetas[sl], np.broadcast_to(zs, (s, *zs.shape)), np.broadcast_to(labels, (s, k))), c)
        r = res[sl][:, None, :]
        total += (np.abs(g - r).sum(-1) / c - (g * r).sum(-1) / (c * c)).sum(0)
    return total


def gradient_recon_attack(
    residuals: ResidualGradients,
    thetas,
    model: MlpModel,
    label: int,
    c: float,
    config: OptConfig = OptConfig(),
    z_init=None,
) -> ReconResult:
    """Recover the target by descending the gradient-matching loss in input space.

    Uses central finite differences in ``z`` and normalized gradient steps
    with a geometrically decaying step size; keeps the best of
    ``config.restarts`` random starts (the first start is ``z_init`` when
    given). Restarts whose loss turns non-finite are discarded.
    """
    d = model.d_in
    rng = np.random.default_rng(config.seed)
    res = residuals.residuals
    bumps = np.vstack([np.zeros(d), np.eye(d) * config.fd_step, -np.eye(d) * config.fd_step])
    best_z, best_loss = None, math.inf
    for r in range(config.restarts):
        if r == 0 and z_init is not None:
            z = np.array(z_init, dtype=float)
        else:
            z = rng.normal(0.0, config.init_scale, d)
        lr = config.lr
        ok = True
        run_best_z, run_best = z.copy(), math.inf
        for _ in range(config.iterations):
            losses = _recon_losses(z + bumps, res, thetas, model, label, c)
            if not np.all(np.isfinite(losses)):
                ok = False
                break
            if losses[0] < run_best:
                run_best, run_best_z = float(losses[0]), z.copy()
            grad = (losses[1 : d + 1] - losses[d + 1 :]) / (2.0 * config.fd_step)
            norm = np.linalg.norm(grad)
            if norm == 0:
                break
            z = z - lr * grad / norm
            lr *= config.lr_decay
        if ok:
            final = float(_recon_losses(z[None], res, thetas, model, label, c)[0])
            if final < run_best:
                run_best, run_best_z = final, z
            if run_best < best_loss:
                best_loss, best_z = run_best, run_best_z
    return ReconResult(best_z, best_loss, best_z is None, config.restarts)


def nearest_prior_conversion(z_hat, prior: PriorSpec, target_index: Optional[int] = None) -> AttackResult:
    """Turn a free-form reconstruction into a prior guess by L2 distance."""
    z_hat = np.asarray(z_hat, dtype=float).ravel()
    if z_hat.shape[0] != prior.candidates.shape[1]:
        raise InvalidParameterError("reconstruction and prior dimensions differ")
    dist = np.linalg.norm(prior.candidates - z_hat, axis=1)
    return _result(-dist, "nearest_prior", target_index)
