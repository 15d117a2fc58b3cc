"""Comparison methods: majority voting over local policies and fitted-Q baselines.

``QLearn1`` keeps one coefficient vector shared by every step. It is
trained by fitted-Q iteration on targets pooled across steps, repeated for
``H`` passes, each pass rebuilding ``Y_h = r_h + max_a phi(x_{h+1}, a)^T theta``
from the previous pass (zero continuation after the last step).
``QLearnH`` is ordinary backward fitted-Q with one vector per step.
Neither is penalized nor clipped.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import FeatureMap
from .mdp import SiteDataset

RIDGE_FALLBACK = 1e-8


class SingularDesign(UserWarning):
    """The least-squares design was rank deficient; a tiny ridge was applied."""


def ols(Phi: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least squares of ``Y`` on ``Phi``; returns ``(theta, flagged)``.

    A rank-deficient design falls back to ridge with ``lam = 1e-8`` and is flagged.
    """
    d = Phi.shape[1]
    G = Phi.T @ Phi
    if np.linalg.matrix_rank(Phi) < d:
        warnings.warn("rank-deficient design, using ridge fallback", SingularDesign, stacklevel=2)
        return np.linalg.solve(G + RIDGE_FALLBACK * np.eye(d), Phi.T @ Y), True
    theta, *_ = np.linalg.lstsq(Phi, Y, rcond=None)
    return theta, False


def majority_vote_action(policies: Sequence, h: int, x) -> int:
    """Most frequent greedy action among ``policies`` at one state; ties go to the smallest index."""
    X = np.asarray(x, dtype=float)[None, :]
    return int(majority_vote_actions(policies, h, X)[0])


def majority_vote_actions(policies: Sequence, h: int, X) -> np.ndarray:
    if not policies:
        raise ValueError("need at least one policy")
    votes = np.stack([np.asarray(p.actions(h, X), dtype=int) for p in policies], axis=1)
    A = int(votes.max()) + 1
    counts = np.zeros((votes.shape[0], A), dtype=int)
    for col in votes.T:
        counts[np.arange(votes.shape[0]), col] += 1
    return counts.argmax(axis=1)


@dataclass
class BenchmarkPolicy:
    """A fitted baseline.

    ``kind`` is ``"QLearn1"`` or ``"QLearnH"`` for single fits, which carry
    ``theta`` of shape ``(H, d)`` (rows identical for ``QLearn1``), or
    ``"LdtrMV"`` / ``"QLearn1MV"`` for votes over ``members``.
    """

    kind: str
    fmap: FeatureMap | None = None
    theta: np.ndarray | None = None
    members: list = field(default_factory=list)
    flagged: bool = False

    def __post_init__(self):
        if self.kind in ("LdtrMV", "QLearn1MV"):
            if not self.members:
                raise ValueError("majority-vote policies need members")
        elif self.kind in ("QLearn1", "QLearnH"):
            if self.theta is None or not np.all(np.isfinite(self.theta)):
                raise ValueError("Q-learning coefficients must be finite")
        else:
            raise ValueError(f"unknown benchmark kind {self.kind!r}")

    def q_table(self, h: int, X) -> np.ndarray:
        return self.fmap.phi_all_actions(X) @ self.theta[h - 1]

    def actions(self, h: int, X) -> np.ndarray:
        if self.members:
            return majority_vote_actions(self.members, h, X)
        return self.q_table(h, X).argmax(axis=1)

    def to_dict(self) -> dict:
        if self.members:
            return {"kind": self.kind, "members": [m.to_dict() for m in self.members]}
        return {"kind": self.kind, "theta": self.theta.tolist(), "feature_map": self.fmap.to_dict()}


def _max_q(fmap: FeatureMap, X, theta) -> np.ndarray:
    return (fmap.phi_all_actions(X) @ theta).max(axis=1)


def fit_qlearn(dataset: SiteDataset, fmap: FeatureMap, variant: str = "PerStep") -> BenchmarkPolicy:
    """Fitted-Q baseline; ``variant`` is ``"One"`` (shared theta) or ``"PerStep"``."""
    H, d = dataset.H, fmap.d
    designs = [fmap.phi(dataset.states[:, h], dataset.actions[:, h]) for h in range(H)]
    flagged = False
    if variant == "PerStep":
        theta = np.zeros((H, d))
        for h in range(H, 0, -1):
            Y = dataset.rewards[:, h - 1].copy()
            if h < H:
                Y += _max_q(fmap, dataset.states[:, h], theta[h])
            theta[h - 1], flag = ols(designs[h - 1], Y)
            flagged |= flag
        return BenchmarkPolicy("QLearnH", fmap, theta, flagged=flagged)
    if variant == "One":
        Phi = np.vstack(designs)
        shared = np.zeros(d)
        for _ in range(H):
            Ys = []
            for h in range(1, H + 1):
                Y = dataset.rewards[:, h - 1].copy()
                if h < H:
                    Y += _max_q(fmap, dataset.states[:, h], shared)
                Ys.append(Y)
            shared, flag = ols(Phi, np.concatenate(Ys))
            flagged |= flag
        return BenchmarkPolicy("QLearn1", fmap, np.tile(shared, (H, 1)), flagged=flagged)
    raise ValueError(f"unknown variant {variant!r}")


def ldtr_mv(local_policies: Sequence) -> BenchmarkPolicy:
    return BenchmarkPolicy("LdtrMV", members=list(local_policies))


def qlearn1_mv(fits: Sequence[BenchmarkPolicy]) -> BenchmarkPolicy:
    return BenchmarkPolicy("QLearn1MV", members=list(fits))
