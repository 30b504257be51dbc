"""Command-line front end.

Exit codes: 0 success, 2 usage error (bad flags, missing seed, unreadable
config, invalid parameter values), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .accountant import approx_epsilon, calibrate_sigma, epsilon_for, epsilon_from_rdp, rdp_subsampled
from .bounds import (
    DEFAULT_SAMPLES,
    estimate_gamma,
    gamma_closed_form_fullbatch,
    guo_mse_lower_bound,
    rero_from_rdp,
    rero_fullbatch_rdp_closed,
)
from .errors import InvalidParameterError, ReroError
from .harness import ExperimentConfig, mse_baselines, run_config, write_outputs

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _num(s):
    return float(s)


def _build_parser():
    p = _Parser(prog="reroguard", description="Reconstruction-robustness bounds and attacks for DP-SGD.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="noise multiplier for a target (epsilon, delta)")
    c.add_argument("--eps", type=_num, required=True, help="target epsilon (nats)")
    c.add_argument("--delta", type=_num, default=1e-5, help="DP delta (probability, default 1e-5)")
    c.add_argument("--q", type=_num, required=True, help="sampling probability in (0, 1]")
    c.add_argument("--T", type=int, required=True, help="number of DP-SGD steps")
    c.add_argument("--accountant", choices=("rdp", "pld"), default="rdp", help="accountant (default rdp)")
    c.add_argument("--out", help="write the result as JSON to this path")

    b = sub.add_parser("bound", help="reconstruction-success bound gamma")
    b.add_argument("--kappa", type=_num, required=True, help="prior success probability in (0, 1]")
    b.add_argument("--q", type=_num, required=True, help="sampling probability in [0, 1]")
    b.add_argument("--sigma", type=_num, required=True, help="noise multiplier (noise std / C)")
    b.add_argument("--T", type=int, required=True, help="number of DP-SGD steps")
    b.add_argument("--N", type=int, default=DEFAULT_SAMPLES, help="Monte Carlo samples (default 1e6)")
    b.add_argument("--method", choices=("mc", "closed", "eq5"), default="mc",
                   help="mc: sampled blow-up bound (needs --seed); closed: exact q=1 form; eq5: RDP closed form at q=1")
    b.add_argument("--proposal", choices=("mixture", "nu"), default="mixture", help="MC sampling scheme")
    b.add_argument("--seed", type=int, help="RNG seed (required for --method mc)")
    b.add_argument("--out", help="write the result as JSON to this path")

    r = sub.add_parser("rdp-bound", help="RDP-based reconstruction bound and epsilon")
    r.add_argument("--kappa", type=_num, required=True, help="prior success probability in (0, 1]")
    r.add_argument("--q", type=_num, required=True, help="sampling probability in [0, 1]")
    r.add_argument("--sigma", type=_num, required=True, help="noise multiplier (noise std / C)")
    r.add_argument("--T", type=int, required=True, help="number of DP-SGD steps")
    r.add_argument("--delta", type=_num, default=1e-5, help="DP delta for the reported epsilon")
    r.add_argument("--out", help="write the result as JSON to this path")

    for name, engine, helptext in (
        ("simulate-attack", "idealized", "attack success on the idealized score simulator"),
        ("train-attack", "real-mlp", "attack success against DP-SGD-trained MLPs"),
    ):
        s = sub.add_parser(name, help=helptext, argument_default=argparse.SUPPRESS)
        s.set_defaults(engine=engine)
        _experiment_flags(s, mlp=engine == "real-mlp")

    w = sub.add_parser("sweep", help="run an experiment grid from a config file", argument_default=argparse.SUPPRESS)
    _experiment_flags(w, mlp=True, sweep=True)

    bl = sub.add_parser("baselines", help="MSE reference values")
    bl.add_argument("--eps", type=_num, nargs="*", default=[], help="epsilons for the 1/(4(e^eps-1)) reference")
    bl.add_argument("--points", help="text/CSV file of points (one per row) for nearest-neighbour thresholds")
    bl.add_argument("--low", type=_num, default=0.0, help="lower coordinate bound of the data domain")
    bl.add_argument("--high", type=_num, default=1.0, help="upper coordinate bound of the data domain")
    bl.add_argument("--out", help="write the result as JSON to this path")
    return p


def _experiment_flags(s, mlp=False, sweep=False):
    s.add_argument("--config", help="JSON ExperimentConfig; explicit flags override its fields")
    s.add_argument("--seed", type=int, help="master RNG seed (required, here or in the config)")
    s.add_argument("--eps", dest="epsilon", type=_num, help="target epsilon; sigma is calibrated")
    s.add_argument("--sigma", type=_num, help="noise multiplier (noise std / C)")
    s.add_argument("--delta", type=_num, help="DP delta")
    s.add_argument("--q", type=_num, help="sampling probability")
    s.add_argument("--T", dest="steps", type=int, help="number of DP-SGD steps")
    s.add_argument("--C", dest="clip_c", type=_num, help="clipping norm")
    s.add_argument("--n", dest="n_prior", type=int, help="prior size")
    s.add_argument("--trials", type=int, help="number of trials (>= 100)")
    s.add_argument("--attacks", nargs="+", help="prior_aware, improved, likelihood, gradient_recon")
    s.add_argument("--N", dest="mc_samples", type=int, help="Monte Carlo samples for the bound")
    s.add_argument("--accountant", choices=("rdp", "pld"), help="accountant used for calibration")
    s.add_argument("--prior-mode", dest="prior_mode", choices=("data", "noise"), help="prior source")
    s.add_argument("--tag", help="experiment label")
    s.add_argument("--out", help="output path prefix for <out>.csv and <out>.json")
    s.add_argument("--timing", action="store_true", help="fill runtime_ms (breaks byte-identical reruns)")
    s.add_argument("--dry-run", dest="dry_run", action="store_true", help="print the resolved config and exit")
    if mlp:
        s.add_argument("--d-in", dest="d_in", type=int, help="input dimension")
        s.add_argument("--hidden", type=int, nargs="+", help="hidden layer widths")
        s.add_argument("--n-known", dest="n_known", type=int, help="size of the known set")
        s.add_argument("--lr", type=_num, help="learning rate")
        s.add_argument("--no-subtraction", dest="subtraction", action="store_false",
                       help="ablation: do not subtract known gradients")
        s.add_argument("--subtraction-mode", dest="subtraction_mode", choices=("exact", "expected"),
                       help="use the sampled membership or its expectation")
    if sweep:
        s.add_argument("--sweep", choices=("none", "fixed_epsilon", "prior_size"), help="grid type")
        s.add_argument("--q-grid", dest="q_grid", type=_num, nargs="+", help="sampling rates to sweep")
        s.add_argument("--n-grid", dest="n_grid", type=int, nargs="+", help="prior sizes to sweep")
        s.add_argument("--eps-grid", dest="eps_grid", type=_num, nargs="+", help="epsilons to sweep")
        s.add_argument("--engine", choices=("idealized", "real-mlp"), help="trial engine")


def _write_json(path, payload):
    if path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _cmd_calibrate(a):
    cal = calibrate_sigma(a.eps, a.delta, a.q, a.T, accountant=a.accountant)
    check = epsilon_for(cal.sigma, a.delta, a.q, a.T, a.accountant)
    flag = " (lower bracket edge)" if cal.at_lower_edge else ""
    print(f"sigma={cal.sigma:.6g} epsilon={check:.6g} target={a.eps:g} delta={a.delta:g} accountant={a.accountant}{flag}")
    _write_json(a.out, {
        "sigma": cal.sigma, "epsilon": check, "target": a.eps, "delta": a.delta, "q": a.q, "steps": a.T,
        "accountant": a.accountant, "at_lower_edge": cal.at_lower_edge,
        "approx_epsilon": approx_epsilon(a.q, a.T, a.delta, cal.sigma),
    })


def _cmd_bound(a):
    if a.method == "mc":
        if a.seed is None:
            raise UsageError("bound --method mc requires --seed")
        est = estimate_gamma(a.kappa, a.q, a.sigma, a.T, a.N, seed=a.seed, proposal=a.proposal)
    elif a.q != 1.0:
        raise UsageError(f"--method {a.method} is only defined at q=1")
    elif a.method == "closed":
        est = gamma_closed_form_fullbatch(a.kappa, a.T, a.sigma)
    else:
        est = rero_fullbatch_rdp_closed(a.kappa, a.T, a.sigma)
    print(f"gamma={est.gamma:.6f} +/- {est.std_err:.2g} kappa={est.kappa:g} method={est.method} N={est.n_samples} seed={est.seed}")
    _write_json(a.out, {
        "gamma": est.gamma, "std_err": est.std_err, "kappa": est.kappa, "method": est.method,
        "n_samples": est.n_samples, "seed": est.seed, "q": a.q, "sigma": a.sigma, "steps": a.T,
    })


def _cmd_rdp_bound(a):
    curve = rdp_subsampled(a.T, a.sigma, a.q)
    est = rero_from_rdp(a.kappa, curve)
    eps, alpha = epsilon_from_rdp(curve, a.delta)
    print(f"gamma={est.gamma:.6f} kappa={a.kappa:g} method={est.method} alpha={est.details['alpha']:g} "
          f"epsilon={eps:.6g} delta={a.delta:g}")
    _write_json(a.out, {"gamma": est.gamma, "kappa": a.kappa, "method": est.method, "alpha": est.details["alpha"],
                        "epsilon": eps, "epsilon_alpha": alpha, "delta": a.delta})


def _resolve_config(a):
    given = vars(a).copy()
    for k in ("command", "dry_run", "config"):
        given.pop(k, None)
    base = {}
    config_path = getattr(a, "config", None)
    if config_path:
        try:
            base = json.loads(Path(config_path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(base, dict):
            raise UsageError(f"config {config_path} is not a JSON object")
    merged = {**base, **given}
    if merged.get("seed") is None:
        raise UsageError(f"{a.command} requires --seed (or a seed in the config)")
    if a.command != "sweep":
        merged.setdefault("sweep", "none")
    try:
        return ExperimentConfig.from_dict(merged)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc


def _cmd_experiment(a):
    cfg = _resolve_config(a)
    if getattr(a, "dry_run", False):
        print(json.dumps(cfg.to_dict(), sort_keys=True))
        return
    rows, extras = run_config(cfg)
    if cfg.out:
        write_outputs(rows, cfg.out, cfg, extras)
    parts = []
    for row in rows:
        sweep = " ".join(f"{k}={v:g}" for k, v in row.sweep.items())
        parts.append(f"[{sweep + ' ' if sweep else ''}{row.attack_tag} p={row.p_hat:.4f} gamma={row.gamma_mc:.4f}]")
    print(f"{cfg.tag}: {len(rows)} rows " + " ".join(parts[:8]) + (" ..." if len(parts) > 8 else ""))


def _cmd_baselines(a):
    out = {}
    if a.eps:
        out["guo_mse_lower_bound"] = {
            repr(e): (lambda v: "inf" if math.isinf(v) else v)(guo_mse_lower_bound(e)) for e in a.eps
        }
    if a.points:
        try:
            pts = np.loadtxt(a.points, delimiter="," if a.points.endswith(".csv") else None, ndmin=2)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read points {a.points}: {exc}") from exc
        nn, rand = mse_baselines(pts, a.low, a.high)
        out["nn_threshold"], out["random_threshold"] = nn, rand
    if not out:
        raise UsageError("baselines needs --eps and/or --points")
    print(" ".join(f"{k}={v}" for k, v in out.items()))
    _write_json(a.out, out)


COMMANDS = {
    "calibrate": _cmd_calibrate,
    "bound": _cmd_bound,
    "rdp-bound": _cmd_rdp_bound,
    "simulate-attack": _cmd_experiment,
    "train-attack": _cmd_experiment,
    "sweep": _cmd_experiment,
    "baselines": _cmd_baselines,
}


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidParameterError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ReroError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
