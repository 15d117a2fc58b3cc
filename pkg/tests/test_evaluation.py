import math

import numpy as np
import pytest

from fdtr.evaluation import (
    ZeroBehaviorProbability,
    coverage_diagnostics,
    cross_validate_c,
    evaluate_exact,
    evaluate_mc,
    evaluate_step_is,
    optimal_visitation,
    pessimism_event,
    pessimism_event_rate,
    suboptimality,
)
from fdtr.features import TabularFeatureMap
from fdtr.mdp import BehaviorPolicy, SiteDataset, collect_dataset, exact_optimal, sample_spec
from fdtr.pevi import PenaltyParams, ldtr_fit
from helpers import point_mass_spec
from oracles import best_value_by_enumeration, policy_value_enumeration, step_is_loop


@pytest.fixture(scope="module")
def finite_spec():
    return sample_spec(2, 2, 2, 3, 3, seed=5, variant="finite", n_states=5)


class ConstantPolicy:
    def __init__(self, a):
        self.a = a

    def actions(self, h, X):
        return np.full(np.atleast_2d(X).shape[0], self.a)


def _tables(spec, k):
    P = np.stack([spec.transition_matrix(k, h) for h in range(1, spec.H + 1)])
    R = np.stack([spec.mean_reward_table(k, h) for h in range(1, spec.H + 1)])
    return P, R


def test_exact_matches_enumeration(finite_spec):
    P, R = _tables(finite_spec, 0)
    pol = ConstantPolicy(1)
    table = np.ones((finite_spec.H, finite_spec.n_states), dtype=int)
    np.testing.assert_allclose(evaluate_exact(finite_spec, 0, pol), policy_value_enumeration(P, R, table))


def test_optimal_tables_beat_every_policy():
    spec = sample_spec(1, 1, 1, 2, 2, seed=3, variant="finite", n_states=3)
    P, R = _tables(spec, 0)
    np.testing.assert_allclose(exact_optimal(spec, 0).V[0], best_value_by_enumeration(P, R), atol=1e-12)


def test_point_mass_value():
    spec = point_mass_spec(H=4, reward=0.5)
    np.testing.assert_allclose(evaluate_exact(spec, 0, ConstantPolicy(0)), 2.0)


def test_mc_agrees_with_exact(finite_spec):
    pol = ConstantPolicy(2)
    truth = evaluate_exact(finite_spec, 1, pol).mean()
    est = evaluate_mc(finite_spec, 1, pol, 4000, seed=0)
    assert abs(est.mean - truth) < 4 * est.std_error


def test_mc_standard_error_shrinks(finite_spec):
    pol = ConstantPolicy(0)
    small = evaluate_mc(finite_spec, 0, pol, 400, seed=1)
    big = evaluate_mc(finite_spec, 0, pol, 1600, seed=1)
    assert 0.35 < big.std_error / small.std_error < 0.65


def test_mc_needs_rollouts(finite_spec):
    with pytest.raises(ValueError):
        evaluate_mc(finite_spec, 0, ConstantPolicy(0), 0, seed=0)


def test_step_is_on_policy_is_mean_return(finite_spec):
    beh = BehaviorPolicy("uniform", 3)
    ds = collect_dataset(finite_spec, 0, 200, beh, seed=2)
    est = evaluate_step_is(ds, beh.for_site(0), beh.for_site(0))
    assert est.mean == pytest.approx(ds.rewards.sum(axis=1).mean())


def test_step_is_disjoint_support_is_zero(finite_spec):
    beh = BehaviorPolicy("subset", 3, allowed=[[0, 1]])
    ds = collect_dataset(finite_spec, 0, 100, beh, seed=2)
    assert evaluate_step_is(ds, beh.for_site(0), ConstantPolicy(2)).mean == 0.0


def test_step_is_zero_behavior_probability(finite_spec):
    ds = collect_dataset(finite_spec, 0, 50, BehaviorPolicy("uniform", 3), seed=2)
    beh = BehaviorPolicy("subset", 3, allowed=[[0]])
    with pytest.raises(ZeroBehaviorProbability):
        evaluate_step_is(ds, beh.for_site(0), ConstantPolicy(0))


def test_step_is_matches_loop(finite_spec):
    beh = BehaviorPolicy("uniform", 3)
    ds = collect_dataset(finite_spec, 1, 60, beh, seed=4)
    target = ConstantPolicy(1)
    states = ds.states[:, :, 0].astype(int)
    ref = step_is_loop(
        states,
        ds.actions,
        ds.rewards,
        lambda h, x, a: 1 / 3,
        lambda h, x, a: float(a == 1),
    )
    assert evaluate_step_is(ds, beh.for_site(1), target).mean == pytest.approx(ref)


def test_weighted_step_is_bounded(finite_spec):
    beh = BehaviorPolicy("uniform", 3)
    ds = collect_dataset(finite_spec, 0, 300, beh, seed=6)
    est = evaluate_step_is(ds, beh.for_site(0), ConstantPolicy(0), weighted=True)
    assert 0.0 <= est.mean <= finite_spec.H


def test_optimal_policy_has_zero_suboptimality(finite_spec):
    tables = exact_optimal(finite_spec, 0)
    rep = suboptimality(finite_spec, 0, tables, 0)
    assert rep.subopt == pytest.approx(0.0, abs=1e-12)
    assert math.isnan(rep.bound)


def test_visitation_rows_are_distributions(finite_spec):
    dist = optimal_visitation(finite_spec, 1, 2)
    np.testing.assert_allclose(dist.sum(axis=1), 1.0)
    assert dist[0, 2] == 1.0


def test_subopt_report_for_pessimistic_fit(finite_spec):
    ds = collect_dataset(finite_spec, 0, 100, BehaviorPolicy("uniform", 3), seed=0)
    pol = ldtr_fit(ds, finite_spec.fmap, PenaltyParams(c=1.0, xi=0.1))
    rep = suboptimality(finite_spec, 0, pol, 1)
    assert rep.subopt >= -1e-12
    assert rep.bound > 0


def test_pessimism_event_trivial_scales(finite_spec):
    ds = collect_dataset(finite_spec, 0, 40, BehaviorPolicy("uniform", 3), seed=0)
    pol = ldtr_fit(ds, finite_spec.fmap, PenaltyParams())
    assert pessimism_event(finite_spec, 0, pol, gamma_scale=math.inf)
    assert not pessimism_event(finite_spec, 0, pol, gamma_scale=0.0)
    fits = [(finite_spec, 0, pol)] * 3
    assert pessimism_event_rate(fits, math.inf) == 1.0
    assert pessimism_event_rate(fits, 0.0) == 0.0
    with pytest.raises(ValueError):
        pessimism_event_rate([])


def _one_hot_dataset(S, n_per):
    states = np.repeat(np.arange(S), n_per).astype(float)
    n = states.size
    ds = SiteDataset(0, np.stack([states, states], axis=1)[:, :, None], np.zeros((n, 1), dtype=int), np.zeros((n, 1)))
    phi0 = np.zeros((S, 1, 1))
    phi1 = np.eye(S)[:, None, :]
    return ds, TabularFeatureMap(phi0, phi1)


def test_coverage_one_hot():
    ds, fmap = _one_hot_dataset(4, 25)
    diag = coverage_diagnostics([ds], fmap)
    # the zero homogeneous coordinate pins the minimum at zero
    assert diag.min_eigenvalue[0, 0] == pytest.approx(0.0, abs=1e-12)
    eig = np.linalg.eigvalsh(diag.covariance[0, 0][1:, 1:])
    np.testing.assert_allclose(eig, 0.25)


def test_coverage_rank_one():
    states = np.zeros((30, 2, 1))
    ds = SiteDataset(0, states, np.zeros((30, 1), dtype=int), np.zeros((30, 1)))
    fmap = TabularFeatureMap(np.ones((1, 1, 1)), np.ones((1, 1, 1)))
    diag = coverage_diagnostics([ds], fmap)
    assert diag.min_eigenvalue[0, 0] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(diag.balance0, 1.0)


def test_cross_validation_grid_handling(finite_spec):
    beh = BehaviorPolicy("uniform", 3)
    ds = [collect_dataset(finite_spec, k, 40, beh, seed=1) for k in range(2)]
    assert cross_validate_c(ds, finite_spec.fmap, [0.3], beh) == 0.3
    assert cross_validate_c(ds, finite_spec.fmap, [0.2, 0.2], beh) == 0.2
    with pytest.raises(ValueError):
        cross_validate_c(ds, finite_spec.fmap, [], beh)


def test_cross_validation_deterministic(finite_spec):
    beh = BehaviorPolicy("uniform", 3)
    ds = [collect_dataset(finite_spec, k, 40, beh, seed=1) for k in range(2)]
    grid = [0.0, 0.01, 0.1]
    a = cross_validate_c(ds, finite_spec.fmap, grid, beh, seed=3)
    b = cross_validate_c(ds, finite_spec.fmap, grid, beh, seed=3)
    assert a == b and a in grid
