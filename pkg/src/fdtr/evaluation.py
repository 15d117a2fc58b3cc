"""Policy evaluation: exact DP, Monte Carlo, step importance sampling, and diagnostics.

A *policy* here is anything with either ``actions(h, X)`` (deterministic)
or ``action_probs(h, X)`` (stochastic). Steps are 1-based.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .features import FeatureMap
from .mdp import LinearMdpSpec, SiteDataset, exact_optimal, sample_categorical, site_rng


class ZeroBehaviorProbability(ValueError):
    """A logged action has zero probability under the behavior policy."""


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    std_error: float
    n_rollouts: int
    method: str


def action_distribution(policy, h: int, X, action_count: int) -> np.ndarray:
    """Row-stochastic ``(n, action_count)`` matrix for any supported policy."""
    if hasattr(policy, "action_probs"):
        return np.asarray(policy.action_probs(h, X), dtype=float)
    a = np.asarray(policy.actions(h, X), dtype=int)
    out = np.zeros((a.shape[0], action_count))
    out[np.arange(a.shape[0]), a] = 1.0
    return out


def _act(policy, h: int, X, action_count: int, rng: np.random.Generator) -> np.ndarray:
    if hasattr(policy, "action_probs"):
        return sample_categorical(policy.action_probs(h, X), rng)
    return np.asarray(policy.actions(h, X), dtype=int)


# ---------------------------------------------------------------------------
# exact evaluation on finite instances


def policy_value_tables(spec: LinearMdpSpec, k: int, policy) -> np.ndarray:
    """``V_h^pi(s)`` for ``h = 1..H+1``, shape ``(H + 1, S)``."""
    S, A, H = spec.n_states, spec.action_count, spec.H
    states = spec.all_states()
    V = np.zeros((H + 1, S))
    for h in range(H, 0, -1):
        Q = spec.mean_reward_table(k, h) + spec.transition_matrix(k, h) @ V[h]
        V[h - 1] = (action_distribution(policy, h, states, A) * Q).sum(axis=1)
    return V


def evaluate_exact(spec: LinearMdpSpec, k: int, policy) -> np.ndarray:
    """Exact ``V_1^pi`` for every initial state of a finite-variant site."""
    return policy_value_tables(spec, k, policy)[0]


def initial_value_exact(spec: LinearMdpSpec, k: int, policy) -> ValueEstimate:
    """Exact value under the uniform initial-state distribution."""
    return ValueEstimate(float(evaluate_exact(spec, k, policy).mean()), 0.0, 0, "ExactDP")


# ---------------------------------------------------------------------------
# Monte Carlo


def rollout_returns(sim, k: int, policy, n_rollouts: int, seed: int, initial_states=None) -> np.ndarray:
    """Undiscounted returns of ``n_rollouts`` fresh trajectories.

    The environment stream depends only on ``(seed, k)``, so different
    deterministic policies see common random numbers.
    """
    env_rng = site_rng(seed, k, 10)
    act_rng = site_rng(seed, k, 11)
    if initial_states is None:
        X = sim.sample_initial(k, n_rollouts, env_rng)
    else:
        X = np.repeat(np.atleast_2d(np.asarray(initial_states, dtype=float)), n_rollouts, axis=0)
    total = np.zeros(n_rollouts)
    for h in range(1, sim.H + 1):
        A = _act(policy, h, X, sim.action_count, act_rng)
        X, R = sim.step_batch(k, h, X, A, env_rng)
        total += R
    return total


def evaluate_mc(sim, k: int, policy, n_rollouts: int, seed: int, initial_states=None) -> ValueEstimate:
    """Sample mean and standard error of the return over fresh rollouts."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    G = rollout_returns(sim, k, policy, n_rollouts, seed, initial_states)
    se = float(G.std(ddof=1) / math.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return ValueEstimate(float(G.mean()), se, n_rollouts, "MonteCarlo")


# ---------------------------------------------------------------------------
# off-policy evaluation


def step_is_returns(dataset: SiteDataset, behavior, target) -> tuple[np.ndarray, np.ndarray]:
    """Per-step rewards and cumulative importance ratios, both shape ``(n, H)``."""
    n, H = dataset.n, dataset.H
    ratios = np.ones((n, H))
    running = np.ones(n)
    idx = np.arange(n)
    for h in range(1, H + 1):
        X = dataset.states[:, h - 1]
        a = dataset.actions[:, h - 1]
        probs_b = np.asarray(behavior.action_probs(h, X), dtype=float)
        pb = probs_b[idx, a]
        if np.any(pb <= 0):
            raise ZeroBehaviorProbability(f"logged action has zero behavior probability at step {h}")
        pe = action_distribution(target, h, X, probs_b.shape[1])[idx, a]
        running = running * pe / pb
        ratios[:, h - 1] = running
    return dataset.rewards, ratios


def evaluate_step_is(dataset: SiteDataset, behavior, target, weighted: bool = False) -> ValueEstimate:
    """Per-decision importance-sampling value of ``target`` from behavior data.

    The unweighted form is ``n^-1 sum_tau sum_h r_h prod_{t<=h} pi_e / pi_b``.
    With ``weighted=True`` each step is self-normalized by the mean ratio.
    """
    rewards, ratios = step_is_returns(dataset, behavior, target)
    n = dataset.n
    if weighted:
        norm = ratios.mean(axis=0)
        safe = np.where(norm > 0, norm, 1.0)
        contrib = np.where(norm > 0, rewards * ratios / safe, 0.0)
    else:
        contrib = rewards * ratios
    G = contrib.sum(axis=1)
    se = float(G.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return ValueEstimate(float(G.mean()), se, n, "StepIS")


# ---------------------------------------------------------------------------
# suboptimality and the pessimism event


@dataclass(frozen=True)
class SuboptReport:
    site_id: int
    x: int
    v_star: float
    v_pi: float
    subopt: float
    bound: float


def optimal_visitation(spec: LinearMdpSpec, k: int, x: int) -> np.ndarray:
    """State distribution under ``pi*`` from ``x_1 = x``, shape ``(H, S)``."""
    tables = exact_optimal(spec, k)
    S, H = spec.n_states, spec.H
    dist = np.zeros((H, S))
    dist[0, x] = 1.0
    for h in range(1, H):
        P = spec.transition_matrix(k, h)[np.arange(S), tables.pi[h - 1]]
        dist[h] = dist[h - 1] @ P
    return dist


def suboptimality(spec: LinearMdpSpec, k: int, policy, x: int) -> SuboptReport:
    """``V*_1(x) - V^pi_1(x)`` with the data-dependent bound ``2 sum_h E_{pi*}[Gamma_h]``.

    The bound is only computed for policies carrying a penalty (``penalty_from_phi``);
    the expectation is evaluated exactly by propagating the state distribution.
    """
    tables = exact_optimal(spec, k)
    v_star = float(tables.V[0, x])
    v_pi = float(evaluate_exact(spec, k, policy)[x])
    bound = float("nan")
    if hasattr(policy, "penalty_from_phi"):
        dist = optimal_visitation(spec, k, x)
        table = spec.fmap.table()
        S = spec.n_states
        total = 0.0
        for h in range(1, spec.H + 1):
            phi = table[np.arange(S), tables.pi[h - 1]]
            total += float(dist[h - 1] @ policy.penalty_from_phi(h, phi))
        bound = 2.0 * total
    return SuboptReport(k, int(x), v_star, v_pi, v_star - v_pi, bound)


def bellman_errors(spec: LinearMdpSpec, k: int, policy) -> tuple[np.ndarray, np.ndarray]:
    """``|B_hat V_{h+1} - B V_{h+1}|`` and the penalty on the full ``(h, s, a)`` grid.

    Both arrays have shape ``(H, S, A)``; ``V`` is the policy's own value estimate.
    """
    S, A, H = spec.n_states, spec.action_count, spec.H
    states = spec.all_states()
    table = spec.fmap.table()
    err = np.zeros((H, S, A))
    gamma = np.zeros((H, S, A))
    for h in range(1, H + 1):
        v_next = policy.values(h + 1, states)
        truth = spec.mean_reward_table(k, h) + spec.transition_matrix(k, h) @ v_next
        err[h - 1] = np.abs(policy.bellman_estimate_from_phi(h, table) - truth)
        gamma[h - 1] = policy.penalty_from_phi(h, table)
    return err, gamma


def pessimism_event(spec: LinearMdpSpec, k: int, policy, gamma_scale: float = 1.0) -> bool:
    """Whether the Bellman estimation error is within the penalty everywhere on the grid.

    ``gamma_scale`` multiplies the penalty (``inf`` or ``0`` give the trivial cases).
    """
    err, gamma = bellman_errors(spec, k, policy)
    with np.errstate(invalid="ignore"):
        scaled = gamma * gamma_scale if gamma_scale != math.inf else np.full_like(gamma, math.inf)
    return bool(np.all(err <= scaled + 1e-12))


def pessimism_event_rate(spec_fits: Iterable[tuple[LinearMdpSpec, int, object]], gamma_scale: float = 1.0) -> float:
    """Fraction of ``(spec, site, policy)`` fits, one per seed, on which the event holds."""
    outcomes = [pessimism_event(spec, k, pol, gamma_scale) for spec, k, pol in spec_fits]
    if not outcomes:
        raise ValueError("no fits given")
    return float(np.mean(outcomes))


# ---------------------------------------------------------------------------
# coverage


@dataclass(frozen=True)
class CoverageDiagnostics:
    """Per-(site, step) empirical covariance ``Lambda / n`` and norm-balance ratios.

    ``balance0`` and ``balance1`` hold the maxima over samples of
    ``||phi0||^2 d / d0`` and ``||phi1||^2 d / d1``; values at most 1 meet
    the balanced-norm condition.
    """

    covariance: np.ndarray
    min_eigenvalue: np.ndarray
    balance0: np.ndarray
    balance1: np.ndarray


def coverage_diagnostics(datasets: Sequence[SiteDataset], fmap: FeatureMap) -> CoverageDiagnostics:
    K, H, d = len(datasets), datasets[0].H, fmap.d
    cov = np.zeros((K, H, d, d))
    mins = np.zeros((K, H))
    b0 = np.zeros((K, H))
    b1 = np.zeros((K, H))
    for i, ds in enumerate(datasets):
        for h in range(1, H + 1):
            phi = fmap.phi(ds.states[:, h - 1], ds.actions[:, h - 1])
            C = phi.T @ phi / ds.n
            cov[i, h - 1] = C
            mins[i, h - 1] = np.linalg.eigvalsh(C)[0]
            if fmap.d0:
                b0[i, h - 1] = ((phi[:, : fmap.d0] ** 2).sum(axis=1) * d / fmap.d0).max()
            if fmap.d1:
                b1[i, h - 1] = ((phi[:, fmap.d0 :] ** 2).sum(axis=1) * d / fmap.d1).max()
    return CoverageDiagnostics(cov, mins, b0, b1)


# ---------------------------------------------------------------------------
# cross-validation of the penalty constant


def fold_indices(n: int, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def cross_validate_c(
    datasets: Sequence[SiteDataset],
    fmap: FeatureMap,
    grid: Sequence[float],
    behavior,
    params=None,
    folds: int = 5,
    seed: int = 0,
) -> float:
    """Pick the penalty constant maximizing held-out step-IS value of local fits.

    ``behavior`` is a :class:`~fdtr.mdp.BehaviorPolicy`. Every site is split
    into ``folds`` parts; a local pessimistic fit on the other parts is scored
    on each held-out part. Ties go to the smallest ``c``.
    """
    from .pevi import PenaltyParams, ldtr_fit

    grid = [float(c) for c in grid]
    if not grid:
        raise ValueError("grid must be non-empty")
    params = params or PenaltyParams()
    splits = {ds.site_id: fold_indices(ds.n, min(folds, ds.n), site_rng(seed, ds.site_id, 99)) for ds in datasets}
    scores = []
    for c in grid:
        p = params.with_c(c)
        vals = []
        for ds in datasets:
            parts = splits[ds.site_id]
            for i, held in enumerate(parts):
                if len(parts) == 1:
                    train = held
                else:
                    train = np.concatenate([q for j, q in enumerate(parts) if j != i])
                policy = ldtr_fit(ds.subset(train), fmap, p)
                vals.append(evaluate_step_is(ds.subset(held), behavior.for_site(ds.site_id), policy).mean)
        scores.append(float(np.mean(vals)))
    best = max(scores)
    return min(c for c, s in zip(grid, scores) if s == best)
