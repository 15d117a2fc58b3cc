import numpy as np
import pytest

from fdtr.evaluation import evaluate_exact
from fdtr.mdp import (
    BehaviorPolicy,
    SiteDataset,
    SmoothNonlinearMdp,
    collect_dataset,
    epsilon_greedy_on_truth,
    exact_optimal,
    sample_categorical,
    sample_spec,
    sir_select,
    site_rng,
    step_continuous,
    step_finite,
)
from helpers import point_mass_spec
from oracles import best_value_by_enumeration


def test_sample_spec_is_deterministic():
    a = sample_spec(4, 4, 3, 5, 6, seed=11)
    b = sample_spec(4, 4, 3, 5, 6, seed=11)
    for name in ("theta0", "theta_site", "mu", "mu_centers"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


@pytest.mark.parametrize("variant", ["continuous", "finite"])
def test_norm_bounds(variant):
    for seed in range(20):
        spec = sample_spec(4, 4, 3, 4, 3, seed=seed, variant=variant)
        assert np.all(np.linalg.norm(spec.theta0, axis=1) <= 2 + 1e-12)
        assert np.all(np.linalg.norm(spec.theta_site, axis=2) <= 2 + 1e-12)
        joint = np.sqrt((spec.theta0**2).sum(1)[None] + (spec.theta_site**2).sum(2))
        assert joint.max() <= 1 + 1e-12


def test_finite_kernels_are_distributions():
    spec = sample_spec(2, 3, 2, 4, 3, seed=0, variant="finite", n_states=5)
    for k in range(2):
        for h in range(1, 5):
            P = spec.transition_matrix(k, h)
            assert P.min() >= 0
            np.testing.assert_allclose(P.sum(axis=2), 1.0, atol=1e-9)
            R = spec.mean_reward_table(k, h)
            assert R.min() >= 0 and R.max() <= 1


def test_noiseless_continuous_reward():
    spec = sample_spec(2, 2, 1, 1, 2, seed=0, reward_noise_sd=0.0)
    x = np.array([0.4, 0.7])
    _, r = step_continuous(spec, 0, 1, x, 1, np.random.default_rng(0))
    assert r == pytest.approx(float(spec.mean_reward(0, 1, x[None], [1])[0]))


def test_continuous_next_state_stays_in_box():
    spec = sample_spec(4, 4, 2, 3, 6, seed=2)
    rng = np.random.default_rng(0)
    X = rng.random((2000, spec.state_dim))
    Xn, R = spec.step_batch(0, 1, X, rng.integers(0, 6, 2000), rng)
    assert Xn.min() >= 0 and Xn.max() <= 1
    assert R.min() >= 0 and R.max() <= 1


def test_sir_returns_dominant_proposal():
    rng = np.random.default_rng(1)
    w = np.full((10_000, 32), 1e-6)
    w[:, 7] = 1.0
    assert np.mean(sir_select(w, rng) == 7) >= 0.99


def test_sir_follows_the_selected_component():
    spec = sample_spec(2, 2, 1, 1, 2, seed=0, mu_concentration=30.0)
    spec.mu_centers = np.array([[0.5, 0.85], [0.5, 0.15]])
    spec.mu[0, 0] = [1.0, 0.0]
    rng = np.random.default_rng(1)
    Xn, _ = spec.step_batch(0, 1, np.full((5000, 2), 0.5), np.ones(5000, dtype=int), rng)
    assert abs(Xn[:, 1].mean() - 0.85) < 0.05


def test_step_finite_point_mass():
    spec = point_mass_spec(n_states=5, target=3)
    rng = np.random.default_rng(0)
    assert all(step_finite(spec, 0, 1, s, 0, rng)[0] == 3 for s in range(5))


def test_step_finite_two_state_frequency():
    spec = point_mass_spec(n_states=2, target=0)
    spec.mu[0, 0, 0] = [0.5, 0.5]
    rng = np.random.default_rng(5)
    Xn, _ = spec.step_batch(0, 1, np.zeros((10_000, 1)), np.zeros(10_000, dtype=int), rng)
    assert abs(Xn.mean() - 0.5) < 0.02


def test_finite_reward_mean_matches_linear_model():
    spec = sample_spec(2, 2, 1, 1, 2, seed=3, variant="finite", n_states=3, reward_noise_sd=0.1)
    rng = np.random.default_rng(0)
    X = np.full((10_000, 1), 1.0)
    A = np.zeros(10_000, dtype=int)
    _, R = spec.step_batch(0, 1, X, A, rng)
    mean = spec.mean_reward_table(0, 1)[1, 0]
    assert abs(R.mean() - mean) < 3 * 0.1 / 100
    assert R.min() >= 0 and R.max() <= 1


def test_sample_categorical_frequencies():
    rng = np.random.default_rng(0)
    draws = sample_categorical(np.tile([0.2, 0.3, 0.5], (20_000, 1)), rng)
    np.testing.assert_allclose(np.bincount(draws) / 20_000, [0.2, 0.3, 0.5], atol=0.015)


def test_collect_dataset_shapes_and_determinism():
    spec = sample_spec(2, 2, 2, 1, 3, seed=0)
    pol = BehaviorPolicy("uniform", 3)
    ds = collect_dataset(spec, 1, 1, pol, seed=4)
    assert ds.states.shape == (1, 2, 2) and ds.actions.shape == (1, 1)
    again = collect_dataset(spec, 1, 1, pol, seed=4)
    np.testing.assert_array_equal(ds.states, again.states)
    np.testing.assert_array_equal(ds.rewards, again.rewards)
    with pytest.raises(ValueError):
        collect_dataset(spec, 0, 0, pol, seed=0)


def test_subset_policy_restricts_actions():
    spec = sample_spec(2, 2, 2, 3, 4, seed=0)
    pol = BehaviorPolicy("subset", 4, allowed=[[0], [1, 3]])
    assert np.all(collect_dataset(spec, 0, 50, pol, 0).actions == 0)
    assert set(np.unique(collect_dataset(spec, 1, 200, pol, 0).actions)) == {1, 3}
    with pytest.raises(ValueError):
        BehaviorPolicy("subset", 4, allowed=[[]])


def test_epsilon_greedy_sites_differ():
    spec = sample_spec(2, 2, 2, 2, 3, seed=1, variant="finite", n_states=6)
    pol = epsilon_greedy_on_truth(spec, 0.1)
    marg = [np.bincount(collect_dataset(spec, k, 2000, pol, 0).actions.ravel(), minlength=3) for k in range(2)]
    assert np.abs(marg[0] - marg[1]).max() > 100


def test_dataset_rewards_in_unit_interval():
    for variant in ("continuous", "finite"):
        spec = sample_spec(2, 2, 2, 3, 3, seed=0, variant=variant, reward_noise_sd=0.5)
        ds = collect_dataset(spec, 0, 300, BehaviorPolicy("uniform", 3), 0)
        assert ds.rewards.min() >= 0 and ds.rewards.max() <= 1


def test_csv_round_trip(tmp_path):
    spec = sample_spec(2, 2, 1, 3, 3, seed=0)
    ds = collect_dataset(spec, 0, 5, BehaviorPolicy("uniform", 3), 0)
    ds.to_csv(tmp_path / "d.csv")
    back = SiteDataset.from_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.states, ds.states)
    np.testing.assert_array_equal(back.actions, ds.actions)
    np.testing.assert_array_equal(back.rewards, ds.rewards)


def test_exact_optimal_one_step():
    spec = sample_spec(2, 2, 1, 1, 3, seed=0, variant="finite", n_states=4)
    t = exact_optimal(spec, 0)
    np.testing.assert_allclose(t.Q[0], spec.mean_reward_table(0, 1))
    np.testing.assert_allclose(t.V[0], spec.mean_reward_table(0, 1).max(axis=1))


def test_exact_optimal_reward_one_chain():
    spec = point_mass_spec(n_states=3, H=4, reward=1.0)
    np.testing.assert_allclose(exact_optimal(spec, 0).V[0], 4.0)


def test_exact_optimal_matches_enumeration():
    spec = sample_spec(2, 2, 1, 3, 3, seed=7, variant="finite", n_states=2)
    P = np.stack([spec.transition_matrix(0, h) for h in (1, 2, 3)])
    R = np.stack([spec.mean_reward_table(0, h) for h in (1, 2, 3)])
    np.testing.assert_allclose(exact_optimal(spec, 0).V[0], best_value_by_enumeration(P, R), atol=1e-12)


def test_exact_optimal_dominates_random_policies():
    spec = sample_spec(2, 2, 1, 3, 3, seed=2, variant="finite", n_states=4)
    opt = exact_optimal(spec, 0)
    rng = np.random.default_rng(0)

    class Random:
        def __init__(self, table):
            self.table = table

        def action_probs(self, h, X):
            return self.table[h - 1, np.asarray(X, dtype=int).ravel()]

    for _ in range(20):
        pol = Random(rng.dirichlet(np.ones(3), size=(3, 4)))
        assert np.all(opt.V[0] >= evaluate_exact(spec, 0, pol) - 1e-9)


def test_site_rng_streams_independent():
    a = site_rng(1, 0).random(3)
    b = site_rng(1, 1).random(3)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, site_rng(1, 0).random(3))


def test_smooth_nonlinear_mdp_ranges():
    sim = SmoothNonlinearMdp.sample(3, 4, 3, seed=0)
    ds = collect_dataset(sim, 2, 200, BehaviorPolicy("uniform", 3), 0)
    assert ds.states.min() >= 0 and ds.states.max() <= 1
    assert ds.rewards.min() >= 0 and ds.rewards.max() <= 1
