"""Federated pessimistic value iteration (FDTR).

Site ``k`` combines its own trajectories with the projected homogeneous
statistics ``(A_j, b_j)`` of every other site. Those statistics are built
once, from each foreign site's local value functions, and never refreshed.
"""
from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .features import FeatureMap
from .linalg import spd_inverse, spd_solve
from .mdp import SiteDataset
from .pevi import PenaltyParams, PessimisticPolicy
from .stats import (
    ProjectedHomogeneousStats,
    SummaryBundle,
    build_design,
    build_targets,
    bundle_from_design,
    project_homogeneous,
    summarize,
)


class DimensionMismatch(ValueError):
    pass


def site_bundles(dataset: SiteDataset, fmap: FeatureMap, local_policy: PessimisticPolicy) -> list[SummaryBundle]:
    """Raw bundles for ``h = 1..H`` with targets from the site's own local value functions."""
    H = dataset.H
    out = []
    for h in range(1, H + 1):
        V_next = local_policy.value_function(h + 1) if h < H else None
        out.append(summarize(dataset, fmap, V_next, h))
    return out


def site_projected_stats(dataset, fmap, local_policy) -> list[ProjectedHomogeneousStats]:
    """Sender-side projection of :func:`site_bundles`."""
    return [project_homogeneous(b) for b in site_bundles(dataset, fmap, local_policy)]


def _as_projected(stat) -> ProjectedHomogeneousStats:
    if isinstance(stat, SummaryBundle):
        return project_homogeneous(stat)
    return stat


def assemble_sigma(local: SummaryBundle, foreign_A: Sequence[np.ndarray], lam: float) -> np.ndarray:
    """``Lambda_h^k + lam I + blockdiag(sum_j A_j, 0)``."""
    d0, d1 = local.d0, local.d1
    Sigma = local.gram() + lam * np.eye(d0 + d1)
    for A in foreign_A:
        A = np.asarray(A, dtype=float)
        if A.shape != (d0, d0):
            raise DimensionMismatch(f"foreign block has shape {A.shape}, expected {(d0, d0)}")
        Sigma[:d0, :d0] += A
    return 0.5 * (Sigma + Sigma.T)


def fdtr_solve_step(Phi0, Phi1, Y, foreign: Sequence, lam: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form ``(theta0, theta_k)`` of the federated ridge objective at one step.

    ``foreign`` holds ``(A_j, b_j)`` pairs or :class:`ProjectedHomogeneousStats`.
    Returns ``(theta0, theta_k, Sigma)``.
    """
    local = bundle_from_design(Phi0, Phi1, Y)
    pairs = [(s.A, s.b) if isinstance(s, ProjectedHomogeneousStats) else s for s in foreign]
    Sigma = assemble_sigma(local, [A for A, _ in pairs], lam)
    rhs = local.moment().copy()
    for _, b in pairs:
        rhs[: local.d0] += np.asarray(b, dtype=float)
    theta = spd_solve(Sigma, rhs)
    return theta[: local.d0], theta[local.d0 :], Sigma


@dataclass(frozen=True)
class FederatedFitInputs:
    """Everything site ``k`` needs: its data and a fixed snapshot of foreign statistics.

    ``foreign`` maps each step ``h`` to the other sites' projected (or raw)
    statistics. ``N`` is the total trajectory count across all sites.
    """

    dataset: SiteDataset
    fmap: FeatureMap
    params: PenaltyParams
    foreign: Mapping[int, tuple]
    N: int

    def __post_init__(self):
        frozen = {int(h): tuple(_as_projected(s) for s in stats) for h, stats in self.foreign.items()}
        object.__setattr__(self, "foreign", MappingProxyType(frozen))
        if self.N <= 0:
            raise ValueError("N must be positive")
        for stats in frozen.values():
            for s in stats:
                if s.A.shape != (self.fmap.d0, self.fmap.d0):
                    raise DimensionMismatch("foreign statistics disagree with the feature map")


@dataclass
class FdtrFit:
    theta0: np.ndarray
    theta_site: np.ndarray
    Sigma: np.ndarray
    policy: PessimisticPolicy
    site_id: int = 0


def fdtr_fit(inputs: FederatedFitInputs) -> FdtrFit:
    """Backward federated fit for one site."""
    ds, fmap, params = inputs.dataset, inputs.fmap, inputs.params
    H, d0, d = ds.H, fmap.d0, fmap.d
    alpha = params.scale(d, H, inputs.N)
    policy = PessimisticPolicy(fmap, np.zeros((H, d)), np.zeros((H, d, d)), alpha, params.eta, inputs.N)
    Sigmas = np.zeros((H, d, d))
    V_next = None
    for h in range(H, 0, -1):
        Phi0, Phi1 = build_design(ds, fmap, h)
        Y = build_targets(ds, V_next, h)
        theta0, thetak, Sigma = fdtr_solve_step(Phi0, Phi1, Y, inputs.foreign.get(h, ()), params.lam)
        policy.theta[h - 1] = np.concatenate([theta0, thetak])
        policy.M[h - 1] = spd_inverse(Sigma)
        Sigmas[h - 1] = Sigma
        V_next = policy.value_function(h)
    return FdtrFit(policy.theta[:, :d0].copy(), policy.theta[:, d0:].copy(), Sigmas, policy, ds.site_id)


def average_theta0(fits: Sequence[FdtrFit]) -> np.ndarray:
    """Mean over sites of the per-step homogeneous coefficients, shape ``(H, d0)``."""
    if not fits:
        raise ValueError("need at least one fit")
    return np.mean([f.theta0 for f in fits], axis=0)


def fit_all_sites(datasets: Sequence[SiteDataset], fmap: FeatureMap, params: PenaltyParams, snapshots):
    """Convenience driver: given per-site foreign snapshots, fit every site."""
    N = sum(ds.n for ds in datasets)
    return [
        fdtr_fit(FederatedFitInputs(ds, fmap, params, snapshots[ds.site_id], N)) for ds in datasets
    ]
