"""Experiment grids pairing reconstruction bounds with attack success rates."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import beta

from . import __version__
from .accountant import PrivacyParams, calibrate_sigma, epsilon_for, rdp_subsampled
from .attacks import (
    ScoreStreams,
    candidate_streams,
    gradient_recon_attack,
    improved_prior_aware_attack,
    likelihood_attack,
    nearest_prior_conversion,
    OptConfig,
    prior_aware_attack,
    subtract_known,
)
from .bounds import (
    estimate_gamma,
    gamma_closed_form_fullbatch,
    rero_from_rdp,
    rero_fullbatch_rdp_closed,
)
from .dpsgd import PRIOR_MODES, ClusterData, dpsgd_train, make_dataset_split
from .errors import InvalidParameterError, ReroError
from .mlp import MlpModel

CONFIG_SCHEMA = "reroguard/1"
ENGINES = ("idealized", "real-mlp")
ATTACKS = ("prior_aware", "improved", "likelihood", "gradient_recon")
SWEEPS = ("none", "fixed_epsilon", "prior_size")
CSV_COLUMNS = (
    "gamma_mc",
    "gamma_mc_stderr",
    "gamma_eq5",
    "gamma_closed",
    "attack_tag",
    "p_hat",
    "ci_low",
    "ci_high",
    "trials",
    "sigma",
    "epsilon",
    "runtime_ms",
)
MIN_TRIALS = 100


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment (a single cell, or a sweep over ``q_grid``/``n_grid``/``eps_grid``).

    Give either ``sigma`` directly or ``epsilon`` to calibrate it with
    ``accountant``.
    """

    tag: str = "experiment"
    epsilon: Optional[float] = None
    sigma: Optional[float] = None
    delta: float = 1e-5
    steps: int = 100
    clip_c: float = 1.0
    q: float = 1.0
    n_prior: int = 10
    prior_mode: str = "data"
    trials: int = 1000
    engine: str = "idealized"
    attacks: tuple = ("prior_aware",)
    seed: int = 0
    mc_samples: int = 1_000_000
    accountant: str = "pld"
    sweep: str = "none"
    q_grid: tuple = ()
    n_grid: tuple = ()
    eps_grid: tuple = ()
    # real-mlp engine
    d_in: int = 32
    hidden: tuple = (10,)
    n_known: int = 32
    lr: float = 0.01
    subtraction: bool = True
    subtraction_mode: str = "exact"
    recon_iterations: int = 200
    recon_restarts: int = 2
    # outputs
    out: Optional[str] = None
    timing: bool = False

    def __post_init__(self):
        for name in ("attacks", "hidden", "q_grid", "n_grid", "eps_grid"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.engine not in ENGINES:
            raise InvalidParameterError(f"unknown engine {self.engine!r}")
        if self.prior_mode not in PRIOR_MODES:
            raise InvalidParameterError(f"unknown prior mode {self.prior_mode!r}")
        if self.sweep not in SWEEPS:
            raise InvalidParameterError(f"unknown sweep {self.sweep!r}")
        bad = [a for a in self.attacks if a not in ATTACKS]
        if bad or not self.attacks:
            raise InvalidParameterError(f"unknown or missing attacks {bad}")
        if self.trials < MIN_TRIALS:
            raise InvalidParameterError(f"need at least {MIN_TRIALS} trials, got {self.trials}")
        if self.n_prior < 1:
            raise InvalidParameterError("n_prior must be >= 1")
        if self.sigma is not None and self.sigma < 0:
            raise InvalidParameterError("sigma must be >= 0")
        if "gradient_recon" in self.attacks and self.engine != "real-mlp":
            raise InvalidParameterError("gradient_recon needs the real-mlp engine")

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return {"schema": CONFIG_SCHEMA, **d}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        schema = d.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise InvalidParameterError(f"unsupported config schema {schema!r}")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidParameterError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class SummaryRow:
    sweep: dict
    attack_tag: str
    p_hat: float
    ci_low: float
    ci_high: float
    trials: int
    sigma: float
    epsilon: float
    gamma_mc: float = math.nan
    gamma_mc_stderr: float = math.nan
    gamma_eq5: float = math.nan
    gamma_closed: float = math.nan
    failures: int = 0
    runtime_ms: Optional[float] = None
    note: str = ""

    def combined_error(self):
        se_attack = math.sqrt(max(self.p_hat * (1 - self.p_hat), 0.0) / max(self.trials, 1))
        se_bound = 0.0 if math.isnan(self.gamma_mc_stderr) else self.gamma_mc_stderr
        return math.hypot(se_attack, se_bound)

    def respects_bound(self, k=3.0):
        """``p_hat <= gamma_mc + k * combined error`` (vacuous without a bound)."""
        if math.isnan(self.gamma_mc):
            return True
        return self.p_hat <= self.gamma_mc + k * self.combined_error()


# ------------------------------------------------------------ statistics


def clopper_pearson(successes: int, trials: int, level: float = 0.95):
    """Exact binomial confidence interval."""
    if trials <= 0 or not 0 <= successes <= trials:
        raise InvalidParameterError("need 0 <= successes <= trials and trials > 0")
    alpha = 1.0 - level
    low = 0.0 if successes == 0 else float(beta.ppf(alpha / 2, successes, trials - successes + 1))
    high = 1.0 if successes == trials else float(beta.ppf(1 - alpha / 2, successes + 1, trials - successes))
    return low, high


def _trial_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _workers():
    try:
        return max(1, int(os.environ.get("RERO_THREADS", "1")))
    except ValueError:
        return 1


# -------------------------------------------------------- idealized engine


@dataclass(frozen=True)
class IdealizedTrial:
    target_index: int
    included: np.ndarray
    streams: ScoreStreams


def simulate_idealized_trial(q: float, sigma: float, steps: int, n: int, seed=0, rng=None) -> IdealizedTrial:
    """Score streams for orthogonal, all-clipped candidate gradients (``C = 1``).

    Per step the target contributes ``1[included] + sigma * xi`` to its own
    inner product and every other candidate sees ``sigma * xi'``, with all
    ``xi`` independent standard normals. Candidate norms are exactly 1.
    """
    if n < 2:
        raise InvalidParameterError(f"idealized trials need n >= 2, got {n}")
    if not 0 <= q <= 1 or steps < 0 or sigma < 0:
        raise InvalidParameterError("need 0 <= q <= 1, steps >= 0, sigma >= 0")
    rng = np.random.default_rng(seed) if rng is None else rng
    target = int(rng.integers(n))
    included = np.ones(steps, dtype=bool) if q == 1.0 else rng.random(steps) < q
    inner = sigma * rng.standard_normal((n, steps))
    inner[target] += included
    residual_sq = included.astype(float) if sigma == 0 else None
    return IdealizedTrial(target, included, ScoreStreams(inner, 1.0, residual_sq))


def _run_attacks(streams, attacks, sigma, q, target):
    out = {}
    for name in attacks:
        if name == "prior_aware":
            out[name] = prior_aware_attack(streams, target).success
        elif name == "improved":
            out[name] = improved_prior_aware_attack(streams, q, target).success
        elif name == "likelihood":
            out[name] = likelihood_attack(streams, sigma, q, target_index=target).success
    return out


def _idealized_trial_outcome(cfg, sigma, n, index):
    trial = simulate_idealized_trial(cfg.q, sigma, cfg.steps, n, rng=_trial_rng(cfg.seed, index))
    return _run_attacks(trial.streams, cfg.attacks, sigma, cfg.q, trial.target_index)


# --------------------------------------------------------- real-mlp engine


def _mlp_trial_outcome(cfg, sigma, n, index):
    rng = _trial_rng(cfg.seed, index)
    data = ClusterData(d_in=cfg.d_in, seed=cfg.seed)
    split = make_dataset_split(rng, cfg.n_known, n, data, cfg.prior_mode)
    model = MlpModel.classifier(cfg.d_in, cfg.hidden, data.classes)
    params = PrivacyParams(cfg.q, sigma, cfg.clip_c, cfg.steps, cfg.delta)
    transcript = dpsgd_train(params, split, model, cfg.lr, seed=int(rng.integers(2**63)))
    residuals = subtract_known(
        transcript, split.fixed_points, split.fixed_labels, cfg.subtraction, cfg.subtraction_mode
    )
    target = split.target_index
    streams = candidate_streams(residuals, transcript.thetas, model, split.prior, cfg.clip_c)
    out = _run_attacks(streams, cfg.attacks, sigma, cfg.q, target)
    if "gradient_recon" in cfg.attacks:
        opt = OptConfig(iterations=cfg.recon_iterations, restarts=cfg.recon_restarts, seed=int(rng.integers(2**31)))
        recon = gradient_recon_attack(residuals, transcript.thetas, model, split.target[1], cfg.clip_c, opt)
        out["gradient_recon"] = (
            None if recon.failed else nearest_prior_conversion(recon.z_hat, split.prior, target).success
        )
    return out


# ------------------------------------------------------------ experiments


def resolve_sigma(cfg: ExperimentConfig):
    """``(sigma, epsilon)`` for a cell, calibrating when only epsilon is given."""
    if cfg.sigma is not None:
        if cfg.sigma == 0:
            return 0.0, math.inf
        return cfg.sigma, epsilon_for(cfg.sigma, cfg.delta, cfg.q, cfg.steps, cfg.accountant)
    if cfg.epsilon is None:
        raise InvalidParameterError("give sigma or epsilon")
    cal = calibrate_sigma(cfg.epsilon, cfg.delta, cfg.q, cfg.steps, accountant=cfg.accountant)
    return cal.sigma, cal.epsilon


def bound_columns(kappa, q, sigma, steps, mc_samples, seed):
    """``(gamma_mc, stderr, gamma_eq5, gamma_closed)`` for one cell."""
    if kappa >= 1.0:
        return 1.0, 0.0, 1.0, 1.0
    if sigma == 0:
        return 1.0, 0.0, 1.0, (1.0 if q == 1 else math.nan)
    mc = estimate_gamma(kappa, q, sigma, steps, mc_samples, seed=seed)
    if q == 1.0:
        eq5 = rero_fullbatch_rdp_closed(kappa, steps, sigma).gamma
        closed = gamma_closed_form_fullbatch(kappa, steps, sigma).gamma
    else:
        eq5 = rero_from_rdp(kappa, rdp_subsampled(steps, sigma, q)).gamma
        closed = math.nan
    return mc.gamma, mc.std_err, eq5, closed


def run_attack_experiment(cfg: ExperimentConfig, sweep_values: Optional[dict] = None):
    """Run ``cfg.trials`` fresh-prior trials and return one row per attack."""
    start = time.perf_counter()
    sweep_values = dict(sweep_values or {})
    sigma, epsilon = resolve_sigma(cfg)
    n = cfg.n_prior
    kappa = 1.0 / n
    gamma_mc, gamma_se, gamma_eq5, gamma_closed = bound_columns(kappa, cfg.q, sigma, cfg.steps, cfg.mc_samples, cfg.seed)

    if n == 1:
        outcomes = [{a: True for a in cfg.attacks}] * cfg.trials
        failures = {a: 0 for a in cfg.attacks}
    else:
        run_one = _idealized_trial_outcome if cfg.engine == "idealized" else _mlp_trial_outcome

        def safe(i):
            try:
                return run_one(cfg, sigma, n, i)
            except (ReroError, ArithmeticError, ValueError, np.linalg.LinAlgError):
                return None

        workers = _workers()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(safe, range(cfg.trials)))
        else:
            outcomes = [safe(i) for i in range(cfg.trials)]
        failures = {a: sum(1 for o in outcomes if o is None or o.get(a) is None) for a in cfg.attacks}

    elapsed = (time.perf_counter() - start) * 1000.0
    rows = []
    for attack in cfg.attacks:
        ok = [o[attack] for o in outcomes if o is not None and o.get(attack) is not None]
        done = len(ok)
        wins = int(sum(ok))
        if done:
            low, high = clopper_pearson(wins, done)
            p_hat = wins / done
        else:
            low = high = p_hat = math.nan
        rows.append(
            SummaryRow(
                sweep=sweep_values,
                attack_tag=attack,
                p_hat=p_hat,
                ci_low=low,
                ci_high=high,
                trials=done,
                sigma=sigma,
                epsilon=epsilon,
                gamma_mc=gamma_mc,
                gamma_mc_stderr=gamma_se,
                gamma_eq5=gamma_eq5,
                gamma_closed=gamma_closed,
                failures=failures[attack],
                runtime_ms=elapsed if cfg.timing else None,
            )
        )
    return rows


def _failed_rows(cfg, sweep_values, message):
    return [
        SummaryRow(dict(sweep_values), a, math.nan, math.nan, math.nan, 0, math.nan, cfg.epsilon or math.nan, note=message)
        for a in cfg.attacks
    ]


def fixed_epsilon_sweep(
    eps: float,
    delta: float,
    steps: int,
    clip_c: float,
    q_grid: Sequence[float],
    n_grid: Sequence[int],
    base: Optional[ExperimentConfig] = None,
):
    """Calibrate sigma per sampling rate at fixed epsilon, then bound and attack.

    Returns ``(rows, sigma_curve)`` where ``sigma_curve`` lists
    ``(q, sigma)`` pairs (``nan`` where calibration failed).
    """
    if not q_grid or not n_grid:
        raise InvalidParameterError("q_grid and n_grid must be non-empty")
    base = base or ExperimentConfig(attacks=("improved",))
    rows, curve = [], []
    for q in q_grid:
        try:
            cal = calibrate_sigma(eps, delta, q, steps, accountant=base.accountant)
        except ReroError as exc:
            curve.append((q, math.nan))
            for n in n_grid:
                cfg = base.replace(epsilon=eps, delta=delta, steps=steps, clip_c=clip_c, q=q, n_prior=n)
                rows.extend(_failed_rows(cfg, {"q": q, "n": n}, f"calibration failed: {exc}"))
            continue
        curve.append((q, cal.sigma))
        for n in n_grid:
            cfg = base.replace(
                epsilon=None, sigma=cal.sigma, delta=delta, steps=steps, clip_c=clip_c, q=q, n_prior=n
            )
            for row in run_attack_experiment(cfg, {"q": q, "n": n}):
                row.epsilon = cal.epsilon
                rows.append(row)
    return rows, curve


def prior_size_sweep(
    eps_grid: Sequence[float],
    n_grid: Sequence[int] = tuple(2**k for k in range(1, 12)),
    base: Optional[ExperimentConfig] = None,
):
    """Bound and attack success as the prior grows, at each epsilon."""
    if not eps_grid or not n_grid:
        raise InvalidParameterError("eps_grid and n_grid must be non-empty")
    base = base or ExperimentConfig()
    rows = []
    for eps in eps_grid:
        try:
            sigma, spent = resolve_sigma(base.replace(epsilon=eps, sigma=None))
        except ReroError as exc:
            for n in n_grid:
                rows.extend(_failed_rows(base.replace(epsilon=eps), {"epsilon_target": eps, "n": n}, str(exc)))
            continue
        for n in n_grid:
            cfg = base.replace(epsilon=None, sigma=sigma, n_prior=n)
            for row in run_attack_experiment(cfg, {"epsilon_target": eps, "n": n}):
                row.epsilon = spent
                rows.append(row)
    return rows


def run_config(cfg: ExperimentConfig):
    """Dispatch on ``cfg.sweep``; returns ``(rows, extras)``."""
    if cfg.sweep == "fixed_epsilon":
        if cfg.epsilon is None:
            raise InvalidParameterError("fixed_epsilon sweep needs epsilon")
        rows, curve = fixed_epsilon_sweep(
            cfg.epsilon, cfg.delta, cfg.steps, cfg.clip_c, cfg.q_grid or (cfg.q,), cfg.n_grid or (cfg.n_prior,), cfg
        )
        return rows, {"sigma_curve": [[q, s] for q, s in curve]}
    if cfg.sweep == "prior_size":
        eps_grid = cfg.eps_grid or ((cfg.epsilon,) if cfg.epsilon is not None else ())
        n_grid = cfg.n_grid or tuple(2**k for k in range(1, 12))
        return prior_size_sweep(eps_grid, n_grid, cfg), {}
    return run_attack_experiment(cfg, {}), {}


# ---------------------------------------------------------------- baselines


def mse_baselines(points, low=0.0, high=1.0):
    """``(nn_threshold, random_threshold)`` as per-coordinate mean squared errors.

    ``nn_threshold`` averages each point's MSE to its nearest other point;
    ``random_threshold`` is the expected MSE between two independent
    uniform vectors on ``[low, high]^d``, i.e. ``(high - low)^2 / 6``.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or len(x) < 2:
        raise InvalidParameterError("need at least two points of equal dimension")
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).mean(-1)
    np.fill_diagonal(d2, np.inf)
    nn = float(d2.min(1).mean())
    span = np.broadcast_to(np.asarray(high, dtype=float) - np.asarray(low, dtype=float), (x.shape[1],))
    return nn, float((span**2).mean() / 6.0)


# ------------------------------------------------------------------ output


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def csv_header(rows):
    keys = []
    for row in rows:
        for k in row.sweep:
            if k not in keys:
                keys.append(k)
    return keys + list(CSV_COLUMNS)


def rows_to_csv(rows) -> str:
    header = csv_header(rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        values = dict(row.sweep)
        for col in CSV_COLUMNS:
            values[col] = getattr(row, col)
        writer.writerow([_fmt(values.get(k)) for k in header])
    return buf.getvalue()


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def write_outputs(rows, path, config: Optional[ExperimentConfig] = None, extras: Optional[dict] = None, fmt="csv"):
    """Write ``<path>.csv`` and ``<path>.json`` (sidecar); returns both paths."""
    if fmt != "csv":
        raise InvalidParameterError(f"unsupported output format {fmt!r}")
    base = Path(path)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    sidecar = {
        "schema": CONFIG_SCHEMA,
        "software_version": __version__,
        "columns": csv_header(rows),
        "config": config.to_dict() if config is not None else None,
        "seed": config.seed if config is not None else None,
        "rows": [{**dataclasses.asdict(r), "respects_bound": r.respects_bound()} for r in rows],
        **(extras or {}),
    }
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(rows_to_csv(rows))
        json_path.write_text(json.dumps(_json_safe(sidecar), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write outputs to {base}: {exc}") from exc
    return csv_path, json_path


def load_sidecar_config(path) -> ExperimentConfig:
    data = json.loads(Path(path).read_text())
    if data.get("schema") != CONFIG_SCHEMA:
        raise InvalidParameterError(f"unsupported sidecar schema {data.get('schema')!r}")
    return ExperimentConfig.from_dict(data["config"])
