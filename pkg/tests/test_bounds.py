import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from reroguard.accountant import RdpCurve, rdp_full_batch
from reroguard.bounds import (
    PriorSpec,
    estimate_gamma,
    gamma_closed_form_fullbatch,
    guo_mse_lower_bound,
    kappa_discrete,
    kappa_from_samples,
    kappa_upper_bound,
    log_mixture_ratio,
    rero_from_rdp,
    rero_fullbatch_rdp_closed,
)
from reroguard.errors import InvalidParameterError


# ------------------------------------------------------------------- prior


def test_prior_validation():
    with pytest.raises(InvalidParameterError):
        PriorSpec(np.zeros((2, 3)), weights=[0.7, 0.7])
    with pytest.raises(InvalidParameterError):
        PriorSpec(np.zeros((2, 3)), rho="exact", eta=1.0)
    with pytest.raises(InvalidParameterError):
        PriorSpec(np.zeros((2, 3)), rho="l1")


def test_kappa_uniform_exact_match():
    assert kappa_discrete(PriorSpec(np.arange(10.0)[:, None])) == pytest.approx(0.1)
    assert kappa_discrete(PriorSpec(np.ones((1, 4)))) == 1.0


def test_kappa_nonuniform_and_duplicates():
    prior = PriorSpec(np.arange(4.0)[:, None], weights=[0.1, 0.2, 0.6, 0.1])
    assert kappa_discrete(prior) == pytest.approx(0.6)
    dup = PriorSpec(np.array([[0.0], [0.0], [1.0], [2.0]]))
    assert kappa_discrete(dup) == pytest.approx(0.5)


def test_kappa_sql2_three_of_five():
    pts = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [5.0, 5.0], [-5.0, 3.0]])
    assert kappa_discrete(PriorSpec(pts, rho="sql2", eta=0.05)) == pytest.approx(0.6)


@given(
    st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=12),
    st.floats(0.0, 4.0),
)
def test_kappa_sql2_matches_brute_force(points, eta):
    pts = np.array(points)
    best = 0
    for c in pts:
        best = max(best, sum(1 for p in pts if ((p - c) ** 2).sum() <= eta))
    assert kappa_discrete(PriorSpec(pts, rho="sql2", eta=eta)) == pytest.approx(best / len(pts))


def test_kappa_upper_bound_hand_value():
    upper, conf = kappa_upper_bound(0.05, 10_000, 0.2)
    assert upper == pytest.approx(0.0625)
    assert conf == pytest.approx(1 - math.exp(-10))
    upper, conf = kappa_upper_bound(0.05, 10_000, 1e-12)
    assert upper == pytest.approx(0.05)
    assert conf == pytest.approx(0.0, abs=1e-9)


def test_kappa_from_samples_point_mass_and_flag():
    est = kappa_from_samples(lambda rng, n: np.zeros((n, 3)), 500, 0.1)
    assert est.kappa_hat == 1.0
    assert est.plug_in


def test_kappa_from_samples_discrete_source():
    # a categorical source with a 0.3 mode
    probs = np.array([0.3, 0.25, 0.25, 0.2])
    est = kappa_from_samples(lambda rng, n: rng.choice(4, n, p=probs)[:, None], 4000, 0.2, seed=3)
    assert abs(est.kappa_hat - 0.3) < 0.03
    assert est.kappa_upper == pytest.approx(est.kappa_hat / 0.8)


# ------------------------------------------------------------ log ratio


def test_log_ratio_hand_value():
    assert log_mixture_ratio(np.array([0.0]), 0.5, 1.0) == pytest.approx(math.log(0.5 + 0.5 * math.exp(-0.5)))
    assert log_mixture_ratio(np.array([0.0]), 0.5, 1.0) == pytest.approx(-0.21907, abs=1e-5)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(0.1, 100))
def test_log_ratio_linear_at_full_batch(w, sigma):
    w = np.array(w)
    expected = (2 * w.sum() - len(w)) / (2 * sigma**2)
    got = log_mixture_ratio(w, 1.0, sigma)
    assert got == pytest.approx(expected, rel=1e-12, abs=1e-12 * (1 + np.abs(w).sum() / sigma**2))


def test_log_ratio_vanishes_with_noise():
    w = np.array([0.3, -2.0, 5.0])
    assert abs(log_mixture_ratio(w, 0.3, 1e8)) < 1e-12


@given(st.floats(-1e4, 1e4), st.floats(0.001, 0.999), st.floats(0.05, 10))
def test_log_ratio_stable_and_matches_direct(w, q, sigma):
    got = float(log_mixture_ratio(np.array([w]), q, sigma))
    assert math.isfinite(got)
    x = (2 * w - 1) / (2 * sigma**2)
    if x < 50:
        assert got == pytest.approx(math.log(1 - q + q * math.exp(x)), rel=1e-9, abs=1e-12)


# ---------------------------------------------------------- closed forms


def test_closed_form_hand_values():
    assert gamma_closed_form_fullbatch(0.1, 100, 10).gamma == pytest.approx(norm.cdf(norm.ppf(0.1) + 1))
    assert gamma_closed_form_fullbatch(0.1, 100, 10).gamma == pytest.approx(0.3892, abs=2e-4)
    assert gamma_closed_form_fullbatch(0.3, 0, 10).gamma == pytest.approx(0.3)
    assert gamma_closed_form_fullbatch(1.0, 10, 1).gamma == 1.0


def test_eq5_hand_values():
    est = rero_fullbatch_rdp_closed(0.1, 100, 10)
    assert est.gamma == pytest.approx(math.exp(-(math.sqrt(math.log(10)) - math.sqrt(0.5)) ** 2))
    assert est.gamma == pytest.approx(0.5186, abs=1e-4)
    assert rero_fullbatch_rdp_closed(0.1, 10_000, 1).gamma == 1.0
    assert rero_fullbatch_rdp_closed(0.2, 0, 1).gamma == pytest.approx(0.2)
    assert est.method == "rdp_eq5"


def test_rero_from_rdp_hand_values():
    assert rero_from_rdp(0.1, RdpCurve((2,), (1.0,))).gamma == pytest.approx(math.sqrt(0.1 * math.e))
    assert rero_from_rdp(0.1, RdpCurve((2,), (1.0,))).gamma == pytest.approx(0.5214, abs=1e-4)
    zero = RdpCurve(tuple(range(2, 2000)), (0.0,) * 1998)
    assert rero_from_rdp(0.1, zero).gamma == pytest.approx(0.1, rel=2e-3)
    assert rero_from_rdp(1.0, RdpCurve((2,), (3.0,))).gamma == 1.0
    assert rero_from_rdp(0.1, RdpCurve((2,), (1e6,))).gamma == 1.0


@pytest.mark.parametrize("kappa,steps,sigma", [(0.1, 100, 10), (0.01, 100, 5), (0.5, 10, 4), (0.01, 1000, 30)])
def test_eq5_agrees_with_dense_rdp_grid(kappa, steps, sigma):
    grid = np.linspace(1.0001, 400, 400_000)
    general = rero_from_rdp(kappa, rdp_full_batch(steps, sigma, grid)).gamma
    assert general == pytest.approx(rero_fullbatch_rdp_closed(kappa, steps, sigma).gamma, rel=0.01)


def test_guo_reference():
    assert guo_mse_lower_bound(math.log(2)) == pytest.approx(0.25)
    assert guo_mse_lower_bound(math.log(2), [1.0, 1.0], 2) == pytest.approx(0.25)
    assert guo_mse_lower_bound(0.0) == math.inf
    assert guo_mse_lower_bound(math.inf) == 0.0
    assert guo_mse_lower_bound(800.0) == pytest.approx(0.0, abs=1e-300)


# ------------------------------------------------------------- estimator


def test_estimator_matches_closed_form():
    est = estimate_gamma(0.1, 1.0, 10.0, 100, 1_000_000, seed=0)
    assert abs(est.gamma - 0.3891) <= 0.005
    assert est.method == "mc_blowup" and est.n_samples == 1_000_000 and est.seed == 0
    assert 0 < est.std_err < 0.005


def test_estimator_full_event_and_no_signal():
    assert estimate_gamma(1.0, 0.3, 2.0, 10, 20_000, seed=1).gamma == pytest.approx(1.0)
    quiet = estimate_gamma(0.1, 0.5, 1e6, 50, 20_000, seed=2)
    assert quiet.gamma == pytest.approx(0.1, abs=1e-3)


def test_estimator_rejects_too_few_samples():
    with pytest.raises(InvalidParameterError):
        estimate_gamma(0.001, 1.0, 1.0, 10, 500)


def test_literal_proposal_matches_closed_form_at_small_shift():
    est = estimate_gamma(0.1, 1.0, 10.0, 100, 400_000, seed=4, proposal="nu")
    assert abs(est.gamma - gamma_closed_form_fullbatch(0.1, 100, 10).gamma) <= 3 * est.std_err + 1e-3


def test_subsampled_estimate_against_exact_one_step_blowup():
    # T=1: ratio is monotone in w, so the optimal event is {w > t} with nu-mass kappa
    q, sigma, kappa = 0.4, 0.8, 0.1
    t = sigma * norm.ppf(1 - kappa)
    exact = (1 - q) * kappa + q * norm.sf((t - 1) / sigma)
    est = estimate_gamma(kappa, q, sigma, 1, 400_000, seed=5)
    assert abs(est.gamma - exact) <= max(4 * est.std_err, 2e-3)


def test_seed_determinism_and_thread_independence():
    a = estimate_gamma(0.1, 0.3, 3.0, 20, 50_000, seed=11, threads=1)
    b = estimate_gamma(0.1, 0.3, 3.0, 20, 50_000, seed=11, threads=3)
    assert a.gamma == b.gamma and a.std_err == b.std_err


@pytest.mark.parametrize("seed", range(3))
def test_monotonicity_in_parameters(seed):
    n = 200_000
    base = estimate_gamma(0.1, 0.3, 3.0, 50, n, seed=seed)
    checks = [
        (estimate_gamma(0.1, 0.3, 3.0, 100, n, seed=seed), 1),  # more steps
        (estimate_gamma(0.1, 0.6, 3.0, 50, n, seed=seed), 1),  # larger q
        (estimate_gamma(0.1, 0.3, 6.0, 50, n, seed=seed), -1),  # more noise
        (estimate_gamma(0.2, 0.3, 3.0, 50, n, seed=seed), 1),  # larger kappa
    ]
    for other, direction in checks:
        slack = 2 * math.hypot(base.std_err, other.std_err)
        assert direction * (other.gamma - base.gamma) >= -slack


def test_kappa_never_exceeds_gamma():
    for q, sigma in [(0.01, 20.0), (0.5, 1.0), (1.0, 50.0)]:
        est = estimate_gamma(0.05, q, sigma, 30, 100_000, seed=6)
        assert est.kappa <= est.gamma + 3 * est.std_err
        assert est.gamma <= 1.0
