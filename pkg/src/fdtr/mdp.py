"""Multi-site linear MDPs: ground truth, simulators and offline datasets.

Two variants share one interface:

* ``"finite"``: integer states with tabular features whose transition
  kernels are exact convex mixtures, so values can be computed by dynamic
  programming;
* ``"continuous"``: states in a box, features from an action-interaction
  map, and next states drawn by sampling-importance-resampling.

Steps ``h`` are 1-based throughout, matching ``h = 1, ..., H``.
Simulators expose ``K``, ``H``, ``action_count``, ``state_dim``,
``sample_initial(k, n, rng)``, ``step_batch(k, h, X, A, rng)`` and
``mean_reward(k, h, X, A)``; anything with those members can be used by
:func:`collect_dataset` and the Monte-Carlo evaluators.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import betaincinv, betaln

from .features import FeatureMap, LinearActionInteraction, QuadraticActionInteraction, TabularFeatureMap

SIR_BATCH = 32


def site_rng(seed: int, site_id: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, site_id, *stream)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(site_id), *map(int, stream)]))


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of a row-stochastic matrix; consumes one uniform per row."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sir_select(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sampling-importance-resampling: pick one proposal per row with probability ∝ weight.

    Rows with zero total weight fall back to a uniform pick.
    """
    weights = np.asarray(weights, dtype=float)
    total = weights.sum(axis=1, keepdims=True)
    probs = np.where(total > 0, weights, 1.0)
    return sample_categorical(probs, rng)


@dataclass
class LinearMdpSpec:
    """Generative model for ``K`` sites sharing the homogeneous reward coefficients.

    Attributes
    ----------
    theta0 : ndarray, shape (H, d0)
    theta_site : ndarray, shape (K, H, d1)
    mu : ndarray
        Finite variant: shape ``(K, H, d1, n_states)``, each ``mu[k, h, i]`` a
        probability table over next states. Continuous variant: shape
        ``(K, H, d1)``, non-negative weights on the component densities.
    mu_centers : ndarray, shape (d1, state_dim)
        Continuous variant only: modes of the Beta component densities.
    """

    variant: str
    K: int
    H: int
    fmap: FeatureMap
    theta0: np.ndarray
    theta_site: np.ndarray
    mu: np.ndarray
    reward_noise_sd: float = 0.1
    mu_centers: np.ndarray | None = None
    mu_concentration: float = 6.0

    def __post_init__(self):
        if self.variant not in ("finite", "continuous"):
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def action_count(self) -> int:
        return self.fmap.action_count

    @property
    def state_dim(self) -> int:
        return self.fmap.state_dim

    @property
    def n_states(self) -> int:
        if self.variant != "finite":
            raise AttributeError("continuous specs have no finite state count")
        return self.fmap.n_states

    @property
    def d0(self) -> int:
        return self.fmap.d0

    @property
    def d1(self) -> int:
        return self.fmap.d1

    def all_states(self) -> np.ndarray:
        """Finite variant: every state as a column of indices, shape ``(S, 1)``."""
        return np.arange(self.n_states, dtype=float)[:, None]

    def mean_reward(self, k: int, h: int, X, A) -> np.ndarray:
        phi0, phi1 = self.fmap.features(X, A)
        return phi0 @ self.theta0[h - 1] + phi1 @ self.theta_site[k, h - 1]

    def transition_matrix(self, k: int, h: int) -> np.ndarray:
        """Finite variant: ``P[s, a, s'] = phi1(s, a)^T mu_h^k(s')``."""
        if self.variant != "finite":
            raise ValueError("transition_matrix needs the finite variant")
        phi1 = self.fmap.table()[:, :, self.d0 :]
        return np.einsum("sai,it->sat", phi1, self.mu[k, h - 1])

    def mean_reward_table(self, k: int, h: int) -> np.ndarray:
        """Finite variant: expected reward for every (state, action)."""
        table = self.fmap.table()
        return table[:, :, : self.d0] @ self.theta0[h - 1] + table[:, :, self.d0 :] @ self.theta_site[k, h - 1]

    def sample_initial(self, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
        low, high = self.fmap.state_bounds()
        if self.variant == "finite":
            return rng.integers(0, self.n_states, size=n).astype(float)[:, None]
        return low + (high - low) * rng.random((n, self.state_dim))

    def _rewards(self, mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        sd = self.reward_noise_sd
        if self.variant == "continuous":
            noise = rng.standard_normal(mean.shape)
            return np.clip(mean + sd * noise, 0.0, 1.0)
        # Beta rewards keep the exact linear mean while staying inside [0, 1]
        u = rng.random(mean.shape)
        if sd <= 0:
            return mean.copy()
        conc = max(0.25 / sd**2 - 1.0, 1e-6)
        m = np.clip(mean, 0.0, 1.0)
        inner = (m > 1e-12) & (m < 1 - 1e-12)
        out = m.copy()
        if np.any(inner):
            out[inner] = betaincinv(m[inner] * conc, (1 - m[inner]) * conc, u[inner])
        return out

    def component_density(self, Xn: np.ndarray) -> np.ndarray:
        """Continuous variant: Beta component densities at next-state candidates, shape ``(..., d1)``."""
        low, high = self.fmap.state_bounds()
        u = np.clip((Xn - low) / (high - low), 1e-12, 1 - 1e-12)
        a = self.mu_concentration * self.mu_centers
        b = self.mu_concentration * (1 - self.mu_centers)
        # product over coordinates as one matrix product in log space
        logp = np.log(u) @ (a - 1).T + np.log1p(-u) @ (b - 1).T - betaln(a, b).sum(axis=1)
        return np.exp(logp)

    def step_batch(self, k: int, h: int, X, A, rng: np.random.Generator):
        """Advance a batch of states one step. Returns ``(X_next, rewards)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A = np.asarray(A, dtype=int)
        n = X.shape[0]
        phi0, phi1 = self.fmap.features(X, A)
        mean = phi0 @ self.theta0[h - 1] + phi1 @ self.theta_site[k, h - 1]
        rewards = self._rewards(mean, rng)
        if self.variant == "finite":
            probs = phi1 @ self.mu[k, h - 1]
            nxt = sample_categorical(np.clip(probs, 0.0, None), rng)
            return nxt.astype(float)[:, None], rewards
        low, high = self.fmap.state_bounds()
        proposals = low + (high - low) * rng.random((n, SIR_BATCH, self.state_dim))
        mix = phi1 * self.mu[k, h - 1]
        # uniform proposal density is constant, so the weight is the target density
        weights = np.einsum("npi,ni->np", self.component_density(proposals), mix)
        pick = sir_select(weights, rng)
        x_next = proposals[np.arange(n), pick]
        return np.clip(x_next, low, high), rewards


def step_continuous(spec: LinearMdpSpec, k: int, h: int, x, a: int, rng: np.random.Generator):
    """Single continuous-variant transition: ``(x_next, reward)``."""
    Xn, R = spec.step_batch(k, h, np.asarray(x, dtype=float)[None, :], np.array([a]), rng)
    return Xn[0], float(R[0])


def step_finite(spec: LinearMdpSpec, k: int, h: int, x_index: int, a: int, rng: np.random.Generator):
    """Single finite-variant transition: ``(x_next_index, reward)``."""
    Xn, R = spec.step_batch(k, h, np.array([[float(x_index)]]), np.array([a]), rng)
    return int(Xn[0, 0]), float(R[0])


def _rescale_rows(vectors: np.ndarray, bound: float) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return vectors / np.maximum(1.0, norms / bound)


def sample_spec(
    d0: int,
    d1: int,
    K: int,
    H: int,
    action_count: int,
    seed: int,
    variant: str = "continuous",
    n_states: int = 6,
    reward_noise_sd: float = 0.1,
    map_kind: str = "linear",
    mu_concentration: float = 6.0,
) -> LinearMdpSpec:
    """Draw a random multi-site linear MDP.

    Reward coefficients are elementwise Uniform(0, 1) and then rescaled per
    step so that ``||(theta0_h, theta_h^k)|| <= 1`` for every site. With
    non-negative features this keeps mean rewards in [0, 1], and it implies
    ``||theta0_h|| <= sqrt(d0)`` and ``||theta_h^k|| <= sqrt(d1)``.
    """
    if min(d0, d1, K, H, action_count) < 1:
        raise ValueError("d0, d1, K, H and action_count must all be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    theta0 = rng.random((H, d0))
    theta_site = rng.random((K, H, d1))
    joint = np.sqrt((theta0**2).sum(axis=1)[None, :] + (theta_site**2).sum(axis=2))
    scale = np.maximum(1.0, joint.max(axis=0))
    theta0 = theta0 / scale[:, None]
    theta_site = theta_site / scale[None, :, None]

    if variant == "finite":
        fmap = random_tabular_map(n_states, action_count, d0, d1, rng)
        mu = rng.dirichlet(np.full(n_states, 0.7), size=(K, H, d1))
        return LinearMdpSpec("finite", K, H, fmap, theta0, theta_site, mu, reward_noise_sd)

    per = {"linear": 2, "quadratic": 3}[map_kind]
    if d0 % per or d1 % per:
        raise ValueError(f"{map_kind} map needs d0 and d1 divisible by {per}")
    cls = LinearActionInteraction if map_kind == "linear" else QuadraticActionInteraction
    fmap = cls(d0 // per, d1 // per, action_count)
    mu = _rescale_rows(rng.random((K, H, d1)), np.sqrt(d1))
    centers = rng.uniform(0.15, 0.85, size=(d1, fmap.state_dim))
    return LinearMdpSpec(
        "continuous",
        K,
        H,
        fmap,
        theta0,
        theta_site,
        mu,
        reward_noise_sd,
        mu_centers=centers,
        mu_concentration=mu_concentration,
    )


def random_tabular_map(n_states: int, action_count: int, d0: int, d1: int, rng: np.random.Generator) -> TabularFeatureMap:
    """Tabular features with ``phi1`` on the probability simplex and joint norm <= 1."""
    phi1 = rng.dirichlet(np.full(d1, 1.5), size=(n_states, action_count))
    budget = np.sqrt(np.clip(1.0 - (phi1**2).sum(axis=2), 0.0, None))
    direction = rng.random((n_states, action_count, d0)) + 0.05
    direction /= np.linalg.norm(direction, axis=2, keepdims=True)
    phi0 = direction * (budget * rng.uniform(0.4, 1.0, size=budget.shape))[:, :, None]
    return TabularFeatureMap(phi0, phi1)


# ---------------------------------------------------------------------------
# behavior policies


@dataclass
class BehaviorPolicy:
    """Data-collecting policy, possibly different per site.

    ``kind`` is one of ``"uniform"``, ``"epsilon_greedy"`` or ``"subset"``.
    ``greedy`` maps ``(k, h, X)`` to the greedy action used by the
    epsilon-greedy kind; ``allowed`` lists the permitted actions per site
    for the subset kind.
    """

    kind: str
    action_count: int
    epsilon: float = 0.1
    greedy: Callable[[int, int, np.ndarray], np.ndarray] | None = None
    allowed: Sequence[Sequence[int]] | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "epsilon_greedy", "subset"):
            raise ValueError(f"unknown behavior policy kind {self.kind!r}")
        if self.kind == "subset":
            if not self.allowed or any(len(a) == 0 for a in self.allowed):
                raise ValueError("every site needs a non-empty allowed action set")
        if self.kind == "epsilon_greedy" and self.greedy is None:
            raise ValueError("epsilon_greedy needs a greedy action function")

    def probs(self, k: int, h: int, X) -> np.ndarray:
        """Action probabilities at each state, shape ``(n, action_count)``."""
        X = np.atleast_2d(X)
        n = X.shape[0]
        A = self.action_count
        if self.kind == "uniform":
            return np.full((n, A), 1.0 / A)
        if self.kind == "subset":
            allowed = list(self.allowed[k % len(self.allowed)])
            p = np.zeros((n, A))
            p[:, allowed] = 1.0 / len(allowed)
            return p
        p = np.full((n, A), self.epsilon / A)
        p[np.arange(n), self.greedy(k, h, X)] += 1.0 - self.epsilon
        return p

    def for_site(self, k: int) -> "SitePolicy":
        return SitePolicy(self, k)


@dataclass
class SitePolicy:
    """A behavior policy bound to one site; exposes ``action_probs(h, X)``."""

    behavior: BehaviorPolicy
    site: int

    def action_probs(self, h: int, X) -> np.ndarray:
        return self.behavior.probs(self.site, h, X)


def epsilon_greedy_on_truth(spec: LinearMdpSpec, epsilon: float) -> BehaviorPolicy:
    """Epsilon-greedy around each site's optimal policy (finite) or myopic best action (continuous)."""
    if spec.variant == "finite":
        tables = [exact_optimal(spec, k) for k in range(spec.K)]

        def greedy(k, h, X):
            return tables[k].actions(h, X)

    else:

        def greedy(k, h, X):
            X = np.atleast_2d(X)
            n = X.shape[0]
            A = spec.action_count
            Xr = np.repeat(X, A, axis=0)
            Ar = np.tile(np.arange(A), n)
            return spec.mean_reward(k, h, Xr, Ar).reshape(n, A).argmax(axis=1)

    return BehaviorPolicy("epsilon_greedy", spec.action_count, epsilon=epsilon, greedy=greedy)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SiteDataset:
    """Offline trajectories of one site.

    ``states`` has shape ``(n, H + 1, state_dim)``; the last slice holds the
    terminal state. ``actions`` and ``rewards`` have shape ``(n, H)``.
    """

    site_id: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    rng_seed: int | None = None

    @property
    def n(self) -> int:
        return self.actions.shape[0]

    @property
    def H(self) -> int:
        return self.actions.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    def subset(self, idx) -> "SiteDataset":
        idx = np.asarray(idx)
        return SiteDataset(self.site_id, self.states[idx], self.actions[idx], self.rewards[idx], self.rng_seed)

    def to_csv(self, path) -> None:
        """Columnar file: one header row, then ``tau, h, x..., a, r`` per transition.

        The header row is ``site_id, n, H, state_dim``; step ``H + 1`` rows
        carry the terminal state with empty action and reward.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site_id", "n", "H", "state_dim"])
            w.writerow([self.site_id, self.n, self.H, self.state_dim])
            w.writerow(["tau", "h"] + [f"x{i}" for i in range(self.state_dim)] + ["a", "r"])
            for tau in range(self.n):
                for h in range(self.H + 1):
                    xs = [repr(float(v)) for v in self.states[tau, h]]
                    if h < self.H:
                        tail = [int(self.actions[tau, h]), repr(float(self.rewards[tau, h]))]
                    else:
                        tail = ["", ""]
                    w.writerow([tau, h + 1] + xs + tail)

    @classmethod
    def from_csv(cls, path) -> "SiteDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        site_id, n, H, m = (int(v) for v in rows[1])
        states = np.zeros((n, H + 1, m))
        actions = np.zeros((n, H), dtype=int)
        rewards = np.zeros((n, H))
        for row in rows[3:]:
            tau, h = int(row[0]), int(row[1]) - 1
            states[tau, h] = [float(v) for v in row[2 : 2 + m]]
            if h < H:
                actions[tau, h] = int(row[2 + m])
                rewards[tau, h] = float(row[3 + m])
        return cls(site_id, states, actions, rewards)


def collect_dataset(sim, k: int, n_k: int, policy: BehaviorPolicy, seed: int) -> SiteDataset:
    """Roll out ``n_k`` independent trajectories at site ``k`` under ``policy``."""
    if n_k < 1:
        raise ValueError("n_k must be >= 1")
    env_rng = site_rng(seed, k, 0)
    act_rng = site_rng(seed, k, 1)
    H = sim.H
    states = np.zeros((n_k, H + 1, sim.state_dim))
    actions = np.zeros((n_k, H), dtype=int)
    rewards = np.zeros((n_k, H))
    X = sim.sample_initial(k, n_k, env_rng)
    for h in range(1, H + 1):
        states[:, h - 1] = X
        A = sample_categorical(policy.probs(k, h, X), act_rng)
        X, R = sim.step_batch(k, h, X, A, env_rng)
        actions[:, h - 1] = A
        rewards[:, h - 1] = R
    states[:, H] = X
    return SiteDataset(k, states, actions, rewards, seed)


# ---------------------------------------------------------------------------
# exact dynamic programming


@dataclass
class OptimalTables:
    """Optimal ``Q*`` (H, S, A), ``V*`` (H + 1, S) and greedy ``pi*`` (H, S) for one site."""

    Q: np.ndarray
    V: np.ndarray
    pi: np.ndarray

    def actions(self, h: int, X) -> np.ndarray:
        s = np.asarray(X, dtype=float).reshape(-1).astype(int)
        return self.pi[h - 1, s]


def exact_optimal(spec: LinearMdpSpec, k: int) -> OptimalTables:
    """Backward induction on a finite-variant site; ties go to the smallest action."""
    if spec.variant != "finite":
        raise ValueError("exact_optimal needs the finite variant")
    S, A, H = spec.n_states, spec.action_count, spec.H
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    pi = np.zeros((H, S), dtype=int)
    for h in range(H, 0, -1):
        Q[h - 1] = spec.mean_reward_table(k, h) + spec.transition_matrix(k, h) @ V[h]
        pi[h - 1] = Q[h - 1].argmax(axis=1)
        V[h - 1] = Q[h - 1].max(axis=1)
    return OptimalTables(Q, V, pi)


# ---------------------------------------------------------------------------
# a smooth, non-linear two-coordinate MDP used for the basis-expansion study


@dataclass
class SmoothNonlinearMdp:
    """State ``(x0, x1)`` in [0, 1]^2; neither reward nor transition is linear in ``(x, a x)``.

    ``x0`` is a homogeneous covariate redrawn uniformly each step; ``x1``
    drifts with the action. The reward mean is
    ``0.5 * f0(x0, a) + 0.5 * f_k(x1, a)`` with shared ``f0`` and site
    specific ``f_k``, both smooth and valued in [0, 1].
    """

    K: int
    H: int
    action_count: int
    site_phase: np.ndarray
    drift: float = 0.15
    transition_sd: float = 0.05
    reward_noise_sd: float = 0.1
    state_dim: int = field(default=2, init=False)

    @classmethod
    def sample(cls, K: int, H: int, action_count: int, seed: int, **kwargs) -> "SmoothNonlinearMdp":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 104729]))
        return cls(K, H, action_count, rng.uniform(0, 1, size=K), **kwargs)

    def _shift(self, A):
        return np.asarray(A, dtype=float) / self.action_count

    def mean_reward(self, k: int, h: int, X, A) -> np.ndarray:
        X = np.atleast_2d(X)
        s = self._shift(A)
        f0 = 0.5 + 0.5 * np.sin(2 * np.pi * (X[:, 0] + s))
        fk = 0.5 + 0.5 * np.cos(2 * np.pi * (X[:, 1] - s + self.site_phase[k]))
        return 0.5 * f0 + 0.5 * fk

    def sample_initial(self, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random((n, 2))

    def step_batch(self, k: int, h: int, X, A, rng: np.random.Generator):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        mean = self.mean_reward(k, h, X, A)
        r = np.clip(mean + self.reward_noise_sd * rng.standard_normal(n), 0.0, 1.0)
        centered = np.asarray(A, dtype=float) - (self.action_count - 1) / 2
        x1 = X[:, 1] + self.drift * centered * np.sin(np.pi * X[:, 1] + 0.5) + self.transition_sd * rng.standard_normal(n)
        x0 = rng.random(n)
        return np.column_stack([x0, np.clip(x1, 0.0, 1.0)]), r
