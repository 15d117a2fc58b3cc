import numpy as np
import pytest

from fdtr.benchmarks import (
    BenchmarkPolicy,
    SingularDesign,
    fit_qlearn,
    ldtr_mv,
    majority_vote_action,
    majority_vote_actions,
    ols,
    qlearn1_mv,
)
from fdtr.features import TabularFeatureMap
from fdtr.mdp import BehaviorPolicy, collect_dataset, exact_optimal, sample_spec


class Fixed:
    def __init__(self, a):
        self.a = a

    def actions(self, h, X):
        return np.full(np.atleast_2d(X).shape[0], self.a)


def test_ols_matches_lstsq():
    rng = np.random.default_rng(0)
    Phi = rng.standard_normal((50, 4))
    Y = rng.standard_normal(50)
    theta, flagged = ols(Phi, Y)
    np.testing.assert_allclose(theta, np.linalg.lstsq(Phi, Y, rcond=None)[0])
    assert not flagged


def test_ols_rank_deficient_is_flagged():
    Phi = np.ones((10, 2))
    with pytest.warns(SingularDesign):
        theta, flagged = ols(Phi, np.ones(10))
    assert flagged
    np.testing.assert_allclose(Phi @ theta, 1.0, atol=1e-6)


@pytest.mark.parametrize("votes, expected", [((0, 0, 1), 0), ((0, 1), 0), ((2, 1, 1), 1), ((3,), 3)])
def test_majority_vote(votes, expected):
    assert majority_vote_action([Fixed(a) for a in votes], 1, [0.0]) == expected


def test_majority_vote_is_row_wise():
    class ByState:
        def actions(self, h, X):
            return np.asarray(X, dtype=int)[:, 0]

    X = np.array([[0.0], [2.0], [1.0]])
    np.testing.assert_array_equal(majority_vote_actions([ByState(), ByState(), Fixed(0)], 1, X), [0, 2, 1])


def test_mv_needs_members():
    with pytest.raises(ValueError):
        majority_vote_actions([], 1, np.zeros((1, 1)))
    with pytest.raises(ValueError):
        ldtr_mv([])


def test_unknown_kind_and_bad_theta():
    with pytest.raises(ValueError):
        BenchmarkPolicy("Nope")
    with pytest.raises(ValueError):
        BenchmarkPolicy("QLearnH", theta=np.array([[np.nan]]))


@pytest.fixture(scope="module")
def data():
    spec = sample_spec(2, 2, 2, 3, 3, seed=11, variant="finite", n_states=6)
    ds = collect_dataset(spec, 0, 400, BehaviorPolicy("uniform", 3), seed=0)
    return spec, ds


def test_single_step_qlearn_is_ols(data):
    spec, ds = data
    short = type(ds)(0, ds.states[:, :2], ds.actions[:, :1], ds.rewards[:, :1])
    fit = fit_qlearn(short, spec.fmap, "PerStep")
    Phi = spec.fmap.phi(short.states[:, 0], short.actions[:, 0])
    np.testing.assert_allclose(fit.theta[0], ols(Phi, short.rewards[:, 0])[0])


def test_qlearn_variants_shapes(data):
    spec, ds = data
    per = fit_qlearn(ds, spec.fmap, "PerStep")
    one = fit_qlearn(ds, spec.fmap, "One")
    assert per.kind == "QLearnH" and one.kind == "QLearn1"
    assert per.theta.shape == one.theta.shape == (3, spec.fmap.d)
    np.testing.assert_array_equal(one.theta[0], one.theta[2])
    with pytest.raises(ValueError):
        fit_qlearn(ds, spec.fmap, "Other")


def test_perstep_recovers_q_on_realizable_tabular():
    # one-hot features over (state, action) make every Q-function realizable
    spec = sample_spec(1, 1, 1, 2, 2, seed=4, variant="finite", n_states=3, reward_noise_sd=0.0)
    S, A = 3, 2
    onehot = np.eye(S * A).reshape(S, A, S * A)
    fmap = TabularFeatureMap(np.zeros((S, A, 0)), onehot)
    ds = collect_dataset(spec, 0, 3000, BehaviorPolicy("uniform", A), seed=1)
    fit = fit_qlearn(ds, fmap, "PerStep")
    truth = exact_optimal(spec, 0)
    states = spec.all_states()
    for h in (1, 2):
        np.testing.assert_allclose(fit.q_table(h, states), truth.Q[h - 1], atol=0.08)


def test_mv_of_identical_members_matches_member(data):
    spec, ds = data
    fit = fit_qlearn(ds, spec.fmap, "One")
    mv = qlearn1_mv([fit, fit, fit])
    X = spec.all_states()
    for h in range(1, 4):
        np.testing.assert_array_equal(mv.actions(h, X), fit.actions(h, X))
    assert mv.to_dict()["kind"] == "QLearn1MV"
