import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdtr.federated import (
    DimensionMismatch,
    FederatedFitInputs,
    assemble_sigma,
    average_theta0,
    fdtr_fit,
    fdtr_solve_step,
    site_bundles,
    site_projected_stats,
)
from fdtr.mdp import BehaviorPolicy, collect_dataset, sample_spec
from fdtr.pevi import PenaltyParams, ldtr_fit, ridge_step
from fdtr.stats import bundle_from_design, project_homogeneous
from oracles import full_objective_minimizer


def _random_sites(rng, K=3, n=20, d0=2, d1=2):
    return [(rng.standard_normal((n, d0)), rng.standard_normal((n, d1)), rng.random(n)) for _ in range(K)]


def _foreign(sites, k):
    return [project_homogeneous(bundle_from_design(*s)) for j, s in enumerate(sites) if j != k]


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_solve_step_matches_full_objective(seed):
    rng = np.random.default_rng(seed)
    sites = _random_sites(rng)
    k = int(rng.integers(0, 3))
    t0, tk, _ = fdtr_solve_step(*sites[k], _foreign(sites, k), lam=1.0)
    r0, rk = full_objective_minimizer(sites, k, 1.0)
    np.testing.assert_allclose(t0, r0, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(tk, rk, rtol=1e-8, atol=1e-10)


def test_solve_step_single_site_is_ridge():
    rng = np.random.default_rng(0)
    P0, P1, Y = _random_sites(rng, K=1)[0]
    t0, t1, Sigma = fdtr_solve_step(P0, P1, Y, [], 1.0)
    theta, Lam, _ = ridge_step(np.hstack([P0, P1]), Y, 1.0)
    np.testing.assert_allclose(np.r_[t0, t1], theta, atol=1e-12)
    np.testing.assert_allclose(Sigma, Lam, atol=1e-12)


def test_assemble_sigma_reductions_and_dominance():
    rng = np.random.default_rng(1)
    sites = _random_sites(rng, K=4)
    local = bundle_from_design(*sites[0])
    base = local.gram() + np.eye(4)
    np.testing.assert_allclose(assemble_sigma(local, [], 1.0), base)
    np.testing.assert_allclose(assemble_sigma(local, [np.zeros((2, 2))] * 3, 1.0), base)
    Sigma = assemble_sigma(local, [f.A for f in _foreign(sites, 0)], 1.0)
    assert np.linalg.eigvalsh(Sigma - base).min() >= -1e-10
    assert np.linalg.eigvalsh(Sigma).min() >= 1.0 - 1e-10
    with pytest.raises(DimensionMismatch):
        assemble_sigma(local, [np.zeros((3, 3))], 1.0)


def test_noiseless_realizable_prediction():
    rng = np.random.default_rng(2)
    K, n = 3, 10_000
    theta0 = rng.random(2)
    sites = []
    for k in range(K):
        P0, P1 = rng.random((n, 2)), rng.random((n, 2))
        sites.append((P0, P1, P0 @ theta0 + P1 @ rng.random(2)))
    t0, tk, _ = fdtr_solve_step(*sites[0], _foreign(sites, 0), 1.0)
    pred = sites[0][0] @ t0 + sites[0][1] @ tk
    assert np.abs(pred - sites[0][2]).max() < 1e-3


def _federation(seed=0, K=3, H=3, n=40, params=PenaltyParams()):
    spec = sample_spec(2, 2, K, H, 3, seed=seed)
    pol = BehaviorPolicy("uniform", 3)
    data = [collect_dataset(spec, k, n, pol, seed) for k in range(K)]
    local = [ldtr_fit(ds, spec.fmap, params) for ds in data]
    stats = [site_projected_stats(ds, spec.fmap, p) for ds, p in zip(data, local)]
    N = sum(ds.n for ds in data)
    fits = []
    for k, ds in enumerate(data):
        foreign = {h: [stats[j][h - 1] for j in range(K) if j != k] for h in range(1, H + 1)}
        fits.append(fdtr_fit(FederatedFitInputs(ds, spec.fmap, params, foreign, N)))
    return spec, data, local, fits


def test_sigma_dominates_local_gram_on_fits():
    spec, data, local, fits = _federation()
    for fit, ds in zip(fits, data):
        for h in range(1, ds.H + 1):
            b = site_bundles(ds, spec.fmap, fit.policy)[h - 1]
            diff = fit.Sigma[h - 1] - (b.gram() + np.eye(spec.fmap.d))
            assert np.linalg.eigvalsh(diff).min() >= -1e-9


def test_penalty_dominance_random_phi():
    spec, data, local, fits = _federation(seed=4)
    rng = np.random.default_rng(0)
    phi = rng.standard_normal((1000, spec.fmap.d))
    for fit, ds in zip(fits, data):
        for h in range(1, ds.H + 1):
            Phi0, Phi1 = spec.fmap.features(ds.states[:, h - 1], ds.actions[:, h - 1])
            Lam = np.hstack([Phi0, Phi1]).T @ np.hstack([Phi0, Phi1]) + np.eye(spec.fmap.d)
            lhs = np.einsum("ni,ij,nj->n", phi, fit.policy.M[h - 1], phi)
            rhs = np.einsum("ni,ij,nj->n", phi, np.linalg.inv(Lam), phi)
            assert np.all(lhs <= rhs + 1e-12)


def test_inputs_are_frozen_snapshot():
    spec, data, local, fits = _federation()
    stats = site_projected_stats(data[1], spec.fmap, local[1])
    foreign = {h: [stats[h - 1]] for h in range(1, 4)}
    inputs = FederatedFitInputs(data[0], spec.fmap, PenaltyParams(), foreign, 80)
    foreign[1].append(stats[0])
    assert len(inputs.foreign[1]) == 1
    with pytest.raises(TypeError):
        inputs.foreign[1] = ()


def test_raw_bundles_are_projected_at_receiver():
    spec, data, local, fits = _federation()
    raw = site_bundles(data[1], spec.fmap, local[1])
    proj = site_projected_stats(data[1], spec.fmap, local[1])
    a = FederatedFitInputs(data[0], spec.fmap, PenaltyParams(), {h: [raw[h - 1]] for h in (1, 2, 3)}, 80)
    b = FederatedFitInputs(data[0], spec.fmap, PenaltyParams(), {h: [proj[h - 1]] for h in (1, 2, 3)}, 80)
    np.testing.assert_array_equal(fdtr_fit(a).policy.theta, fdtr_fit(b).policy.theta)


def test_dimension_mismatch_rejected():
    spec, data, local, fits = _federation()
    bad = project_homogeneous(bundle_from_design(np.ones((3, 3)), np.ones((3, 2)), np.ones(3)))
    with pytest.raises(DimensionMismatch):
        FederatedFitInputs(data[0], spec.fmap, PenaltyParams(), {1: [bad]}, 80)


def test_huge_alpha_gives_zero_values():
    spec, data, local, fits = _federation(params=PenaltyParams(alpha=1e6))
    X = np.random.default_rng(0).random((100, 2))
    for fit in fits:
        assert np.all(fit.policy.values(1, X) == 0)


def test_average_theta0():
    spec, data, local, fits = _federation()
    np.testing.assert_array_equal(average_theta0(fits[:1]), fits[0].theta0)
    a, b = fits[0], fits[1]
    b.theta0 = -a.theta0
    np.testing.assert_allclose(average_theta0([a, b]), 0)
    spec, data, local, fits = _federation(seed=9)
    avg = average_theta0(fits)
    worst = np.max([np.linalg.norm(f.theta0 - spec.theta0, axis=1) for f in fits], axis=0)
    assert np.all(np.linalg.norm(avg - spec.theta0, axis=1) <= worst + 1e-12)
    with pytest.raises(ValueError):
        average_theta0([])
