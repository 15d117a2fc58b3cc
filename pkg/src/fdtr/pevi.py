"""Local pessimistic value iteration (LDTR) and the fitted policy object."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .features import FeatureMap
from .linalg import spd_inverse, spd_solve
from .mdp import SiteDataset
from .stats import build_design, build_targets


@dataclass(frozen=True)
class PenaltyParams:
    """Tuning of the uncertainty penalty.

    ``alpha`` overrides the computed scale when given. ``eta > 0`` switches to
    the misspecification-robust penalty
    ``(alpha + sqrt(N) (H + 1) eta) * ||phi||_M + (H + 1) eta``.
    """

    lam: float = 1.0
    c: float = 0.005
    xi: float = 0.99
    eta: float = 0.0
    alpha: float | None = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if not 0 < self.xi < 1:
            raise ValueError("xi must lie in (0, 1)")
        if self.eta < 0 or self.c < 0:
            raise ValueError("c and eta must be non-negative")

    def scale(self, d: int, H: int, count: int) -> float:
        """``c d H sqrt(log(2 d H count / xi))`` unless ``alpha`` is fixed."""
        if self.alpha is not None:
            return float(self.alpha)
        return penalty_scale(self.c, d, H, count, self.xi)

    def with_c(self, c: float) -> "PenaltyParams":
        return replace(self, c=c)


def penalty_scale(c: float, d: int, H: int, count: int, xi: float) -> float:
    zeta = math.log(2 * d * H * count / xi)
    return c * d * H * math.sqrt(zeta)


@dataclass
class PessimisticPolicy:
    """Per-step linear Q estimates with an elliptical penalty.

    ``theta`` has shape ``(H, d)`` and ``M`` shape ``(H, d, d)`` holding the
    inverse of the penalized Gram matrix. ``count`` is the sample count that
    enters the misspecification term.
    """

    fmap: FeatureMap
    theta: np.ndarray
    M: np.ndarray
    alpha: float
    eta: float = 0.0
    count: int = 0

    @property
    def H(self) -> int:
        return self.theta.shape[0]

    @property
    def action_count(self) -> int:
        return self.fmap.action_count

    def penalty_from_phi(self, h: int, Phi: np.ndarray) -> np.ndarray:
        quad = np.einsum("...i,ij,...j->...", Phi, self.M[h - 1], Phi)
        width = np.sqrt(np.clip(quad, 0.0, None))
        if self.eta > 0:
            H = self.H
            slack = math.sqrt(self.count) * (H + 1) * self.eta
            return (self.alpha + slack) * width + (H + 1) * self.eta
        if self.alpha == 0:
            return np.zeros_like(width)
        return self.alpha * width

    def bellman_estimate_from_phi(self, h: int, Phi: np.ndarray) -> np.ndarray:
        """Unpenalized linear estimate ``phi^T theta_h``."""
        return Phi @ self.theta[h - 1]

    def q_from_phi(self, h: int, Phi: np.ndarray) -> np.ndarray:
        raw = self.bellman_estimate_from_phi(h, Phi) - self.penalty_from_phi(h, Phi)
        return np.clip(np.minimum(raw, self.H - h + 1), 0.0, None)

    def q_table(self, h: int, X) -> np.ndarray:
        """Clipped pessimistic Q for every action, shape ``(n, action_count)``."""
        return self.q_from_phi(h, self.fmap.phi_all_actions(X))

    def actions(self, h: int, X) -> np.ndarray:
        """Greedy actions; ties go to the smallest action index."""
        return self.q_table(h, X).argmax(axis=1)

    def values(self, h: int, X) -> np.ndarray:
        if h > self.H:
            return np.zeros(np.atleast_2d(X).shape[0])
        return self.q_table(h, X).max(axis=1)

    def value_function(self, h: int):
        """``V_h`` as a callable on state batches (zero beyond the horizon)."""
        return lambda X: self.values(h, X)

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "M": self.M.tolist(),
            "alpha": self.alpha,
            "eta": self.eta,
            "count": self.count,
            "feature_map": self.fmap.to_dict(),
        }


def q_value(policy: PessimisticPolicy, h: int, x, a: int) -> float:
    phi = policy.fmap.phi(np.asarray(x, dtype=float)[None, :], [a])
    return float(policy.q_from_phi(h, phi)[0])


def greedy_action(policy: PessimisticPolicy, h: int, x) -> int:
    return int(policy.actions(h, np.asarray(x, dtype=float)[None, :])[0])


def value(policy: PessimisticPolicy, h: int, x) -> float:
    return float(policy.values(h, np.asarray(x, dtype=float)[None, :])[0])


def ridge_step(Phi: np.ndarray, Y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ridge solve ``(Phi^T Phi + lam I)^{-1} Phi^T Y``; also returns the penalized Gram and its inverse."""
    Lam = Phi.T @ Phi + lam * np.eye(Phi.shape[1])
    theta = spd_solve(Lam, Phi.T @ Y)
    return theta, Lam, spd_inverse(Lam)


def ldtr_fit(dataset: SiteDataset, fmap: FeatureMap, params: PenaltyParams = PenaltyParams()) -> PessimisticPolicy:
    """Backward pessimistic value iteration on a single site's data."""
    H, n, d = dataset.H, dataset.n, fmap.d
    if n < 1:
        raise ValueError("dataset is empty")
    alpha = params.scale(d, H, n)
    policy = PessimisticPolicy(fmap, np.zeros((H, d)), np.zeros((H, d, d)), alpha, params.eta, n)
    V_next = None
    for h in range(H, 0, -1):
        Phi0, Phi1 = build_design(dataset, fmap, h)
        Phi = np.hstack([Phi0, Phi1])
        Y = build_targets(dataset, V_next, h)
        theta, _, M = ridge_step(Phi, Y, params.lam)
        policy.theta[h - 1] = theta
        policy.M[h - 1] = M
        V_next = policy.value_function(h)
    return policy
