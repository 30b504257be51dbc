import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate
from scipy.stats import norm

from reroguard.accountant import PrivacyParams
from reroguard.attacks import (
    OptConfig,
    ScoreStreams,
    candidate_streams,
    gradient_recon_attack,
    improved_prior_aware_attack,
    likelihood_attack,
    likelihood_scores,
    nearest_prior_conversion,
    prior_aware_attack,
    recon_loss,
    subtract_known,
)
from reroguard.bounds import PriorSpec
from reroguard.dpsgd import ClusterData, dpsgd_train, make_dataset_split
from reroguard.errors import InvalidParameterError
from reroguard.harness import ExperimentConfig, run_attack_experiment, simulate_idealized_trial
from reroguard.mlp import MlpModel, clip

DATA = ClusterData(d_in=6, classes=3, seed=2)
MODEL = MlpModel.classifier(6, (5,), 3)


def trained(sigma, q=1.0, c=1e-3, steps=20, seed=0, n_known=6):
    split = make_dataset_split(np.random.default_rng(seed), n_known, 6, DATA, "noise")
    tr = dpsgd_train(PrivacyParams(q, sigma, c, steps, 1e-5), split, MODEL, 0.5, seed=seed + 100)
    return split, tr


def quadrature_success(shift, n):
    f = lambda x: norm.pdf(x) * norm.cdf(x + shift) ** (n - 1)
    return integrate.quad(f, -12, 12)[0]


# -------------------------------------------------------------- subtraction


def test_subtraction_disabled_is_identity():
    split, tr = trained(1.0)
    res = subtract_known(tr, split.fixed_points, split.fixed_labels, enabled=False)
    np.testing.assert_array_equal(res.residuals, tr.grads)
    assert not res.subtraction_enabled


def test_noise_free_guess_is_target():
    for seed in range(5):
        split, tr = trained(0.0, seed=seed)
        res = subtract_known(tr, split.fixed_points, split.fixed_labels)
        streams = candidate_streams(res, tr.thetas, MODEL, split.prior, 1e-3)
        assert prior_aware_attack(streams, split.target_index).success
        assert likelihood_attack(streams, 0.0, 1.0, target_index=split.target_index).success


def test_noise_free_subsampled_likelihood_exact_match():
    for seed in range(5):
        split, tr = trained(0.0, q=0.3, seed=seed)
        res = subtract_known(tr, split.fixed_points, split.fixed_labels)
        streams = candidate_streams(res, tr.thetas, MODEL, split.prior, 1e-3)
        if tr.membership[:, -1].any():
            assert likelihood_attack(streams, 0.0, 0.3, target_index=split.target_index).success
            assert improved_prior_aware_attack(streams, 0.3, split.target_index).success


def test_residual_noise_has_std_sigma_c():
    sigma, c = 2.0, 0.01
    split, tr = trained(sigma, q=0.5, c=c, steps=200)
    res = subtract_known(tr, split.fixed_points, split.fixed_labels)
    z, y = split.target
    sampled = tr.membership[:, -1]
    target_grads = clip(MODEL.per_example_grads(tr.thetas, np.broadcast_to(z, (200, 1, 6)), np.full((200, 1), y))[:, 0], c)
    noise = res.residuals[sampled] - target_grads[sampled]
    assert noise.std() == pytest.approx(sigma * c, rel=0.05)


def test_expected_subtraction_mode():
    split, tr = trained(0.0, q=1.0)
    exact = subtract_known(tr, split.fixed_points, split.fixed_labels, mode="exact")
    expected = subtract_known(tr, split.fixed_points, split.fixed_labels, mode="expected")
    # at q=1 every point is sampled, so the two modes coincide
    np.testing.assert_allclose(exact.residuals, expected.residuals, atol=1e-15)
    with pytest.raises(InvalidParameterError):
        subtract_known(tr, split.fixed_points, split.fixed_labels, mode="guess")


# ------------------------------------------------------------ score attacks


def test_ties_break_to_lowest_index():
    streams = ScoreStreams(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]), 1.0)
    assert prior_aware_attack(streams).guess_index == 0
    assert improved_prior_aware_attack(streams, 0.5).guess_index == 0


def test_improved_rejects_zero_budget():
    streams = ScoreStreams(np.zeros((2, 10)), 1.0)
    with pytest.raises(InvalidParameterError):
        improved_prior_aware_attack(streams, 0.0)


def test_improved_keeps_top_steps():
    streams = ScoreStreams(np.array([[5.0, -9.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]]), 1.0)
    assert prior_aware_attack(streams).guess_index == 1
    res = improved_prior_aware_attack(streams, 0.25)
    assert res.guess_index == 0 and res.meta["top_steps"] == 1


@pytest.mark.parametrize("seed", range(40))
def test_improved_equals_plain_at_full_batch(seed):
    trial = simulate_idealized_trial(1.0, 3.0, 50, 8, seed=seed)
    a = prior_aware_attack(trial.streams)
    b = improved_prior_aware_attack(trial.streams, 1.0)
    assert a.guess_index == b.guess_index
    np.testing.assert_array_equal(a.scores, b.scores)


@pytest.mark.parametrize("seed", range(40))
def test_likelihood_agrees_with_plain_at_full_batch(seed):
    trial = simulate_idealized_trial(1.0, 2.0, 30, 6, seed=seed)
    assert likelihood_attack(trial.streams, 2.0, 1.0).guess_index == prior_aware_attack(trial.streams).guess_index


def test_likelihood_full_batch_reduces_to_distance():
    rng = np.random.default_rng(3)
    inner, sq, res_sq = rng.normal(size=(5, 7)), rng.uniform(0.5, 1.0, (5, 7)), rng.uniform(1, 2, 7)
    streams = ScoreStreams(inner, sq, res_sq)
    sigma = 1.7
    scores = likelihood_scores(streams, sigma, 1.0)
    dist_sq = res_sq[None, :] - 2 * inner + sq  # |r - g_z|^2
    np.testing.assert_allclose(scores, ((res_sq[None, :] - dist_sq) / (2 * sigma**2)).sum(1), rtol=1e-12)
    assert int(np.argmax(scores)) == int(np.argmin(dist_sq.sum(1)))


def test_likelihood_weights():
    trial = simulate_idealized_trial(0.5, 1.0, 40, 5, seed=1)
    plain = likelihood_attack(trial.streams, 1.0, 0.5)
    uniform = likelihood_attack(trial.streams, 1.0, 0.5, weights=np.full(5, 0.2))
    assert plain.guess_index == uniform.guess_index
    forced = likelihood_attack(trial.streams, 1.0, 0.5, weights=np.eye(5)[3])
    assert forced.guess_index == 3


@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_argmax_invariant_to_common_scale(scale, seed):
    trial = simulate_idealized_trial(0.3, 1.0, 30, 5, seed=seed)
    scaled = ScoreStreams(trial.streams.inner * scale**2, trial.streams.sq_norms * scale**2)
    assert prior_aware_attack(scaled).guess_index == prior_aware_attack(trial.streams).guess_index
    assert (
        improved_prior_aware_attack(scaled, 0.3).guess_index
        == improved_prior_aware_attack(trial.streams, 0.3).guess_index
    )


def test_idealized_success_matches_quadrature():
    oracle = quadrature_success(1.0, 10)
    assert oracle == pytest.approx(0.34, abs=0.01)
    wins = sum(
        prior_aware_attack(t.streams, t.target_index).success
        for t in (simulate_idealized_trial(1.0, 10.0, 100, 10, seed=s) for s in range(10_000))
    )
    p = wins / 10_000
    assert abs(p - oracle) <= 3 * math.sqrt(oracle * (1 - oracle) / 10_000)


def test_huge_noise_success_is_chance():
    wins = sum(
        prior_aware_attack(t.streams, t.target_index).success
        for t in (simulate_idealized_trial(1.0, 1e8, 20, 4, seed=s) for s in range(4000))
    )
    assert abs(wins / 4000 - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 4000)


def test_attack_result_json_line():
    res = prior_aware_attack(ScoreStreams(np.array([[1.0], [2.0]]), 1.0), target_index=1)
    line = json.loads(res.to_json())
    assert line["guess_index"] == 1 and line["success"] is True and line["attack"] == "prior_aware"
    assert "\n" not in res.to_json()


# ---------------------------------------------------------- inversion attack


def test_nearest_prior_conversion():
    prior = PriorSpec(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 5.0]]))
    assert nearest_prior_conversion([2.0, 0.0], prior).guess_index == 1
    assert nearest_prior_conversion([1.0, 0.0], prior).guess_index == 0
    assert nearest_prior_conversion([0.1, 4.6], prior, target_index=2).success
    with pytest.raises(InvalidParameterError):
        nearest_prior_conversion([1.0], prior)


def _linear_setup():
    data = ClusterData(d_in=4, classes=3, seed=0)
    model = MlpModel((4, 3), activation="linear")
    split = make_dataset_split(np.random.default_rng(0), 5, 5, data)
    tr = dpsgd_train(PrivacyParams(1.0, 0.0, 1e-3, 30, 1e-5), split, model, lr=50.0, seed=1)
    return model, split, tr, subtract_known(tr, split.fixed_points, split.fixed_labels)


def test_noise_free_inversion_recovers_target():
    model, split, tr, res = _linear_setup()
    z, y = split.target
    out = gradient_recon_attack(res, tr.thetas, model, y, 1e-3, OptConfig(iterations=3000, restarts=2, lr=0.5, lr_decay=0.998))
    assert not out.failed
    assert np.mean((out.z_hat - z) ** 2) <= 1e-3


def test_inversion_started_at_target_stays_there():
    model, split, tr, res = _linear_setup()
    z, y = split.target
    out = gradient_recon_attack(res, tr.thetas, model, y, 1e-3, OptConfig(iterations=50, restarts=1, lr=1e-3), z_init=z)
    assert out.loss <= recon_loss(z, res, tr.thetas, model, y, 1e-3) + 1e-9
    assert np.linalg.norm(out.z_hat - z) <= 0.05


def test_inversion_reports_failure_when_all_restarts_diverge():
    model, split, tr, res = _linear_setup()
    bad = type(res)(np.full_like(res.residuals, np.nan))
    out = gradient_recon_attack(bad, tr.thetas, model, 0, 1e-3, OptConfig(iterations=5, restarts=2))
    assert out.failed and out.z_hat is None


@pytest.mark.slow
def test_inversion_weaker_than_prior_aware():
    rows = run_attack_experiment(
        ExperimentConfig(
            epsilon=10, trials=100, engine="real-mlp", d_in=8, n_known=8, clip_c=0.1,
            attacks=("prior_aware", "gradient_recon"), recon_iterations=100, recon_restarts=1,
            mc_samples=20_000, seed=1,
        )
    )
    by_tag = {r.attack_tag: r for r in rows}
    assert by_tag["gradient_recon"].p_hat < by_tag["prior_aware"].p_hat
