"""Per-(site, step) summary statistics: the only data that crosses sites.

A :class:`SummaryBundle` holds the Gram blocks and moment vectors of one
site at one step. :func:`project_homogeneous` turns it into the projected
pair ``(A_j, b_j)`` that the federated estimator consumes, where ``A_j``
is the Schur complement of the heterogeneous block.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .features import FeatureMap
from .linalg import pinv
from .mdp import SiteDataset


class RangeError(ValueError):
    """A value function returned something outside ``[0, H]``."""


@dataclass(frozen=True)
class SummaryBundle:
    site_id: int
    h: int
    n: int
    G00: np.ndarray
    G01: np.ndarray
    G11: np.ndarray
    v0: np.ndarray
    v1: np.ndarray

    @property
    def d0(self) -> int:
        return self.G00.shape[0]

    @property
    def d1(self) -> int:
        return self.G11.shape[0]

    def gram(self) -> np.ndarray:
        """The full block matrix ``[[G00, G01], [G01^T, G11]]``."""
        return np.block([[self.G00, self.G01], [self.G01.T, self.G11]])

    def moment(self) -> np.ndarray:
        return np.concatenate([self.v0, self.v1])

    def __add__(self, other: "SummaryBundle") -> "SummaryBundle":
        if (self.site_id, self.h) != (other.site_id, other.h):
            raise ValueError("can only add bundles of the same site and step")
        return SummaryBundle(
            self.site_id,
            self.h,
            self.n + other.n,
            self.G00 + other.G00,
            self.G01 + other.G01,
            self.G11 + other.G11,
            self.v0 + other.v0,
            self.v1 + other.v1,
        )


@dataclass(frozen=True)
class ProjectedHomogeneousStats:
    site_id: int
    h: int
    n: int
    A: np.ndarray
    b: np.ndarray


def build_design(dataset: SiteDataset, fmap: FeatureMap, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``phi0(x_h, a_h)`` and ``phi1(x_h, a_h)`` of every trajectory."""
    if not 1 <= h <= dataset.H:
        raise ValueError(f"step {h} outside 1..{dataset.H}")
    return fmap.features(dataset.states[:, h - 1], dataset.actions[:, h - 1])


def build_targets(dataset: SiteDataset, V_next: Callable[[np.ndarray], np.ndarray] | None, h: int) -> np.ndarray:
    """``Y_tau = r_h + V_next(x_{h+1})``; ``V_next=None`` means the zero function."""
    r = dataset.rewards[:, h - 1]
    if V_next is None:
        return r.copy()
    v = np.asarray(V_next(dataset.states[:, h]), dtype=float)
    H = dataset.H
    if np.any(v < -1e-9) or np.any(v > H + 1e-9):
        raise RangeError(f"value function left [0, {H}] at step {h + 1}")
    return r + v


def bundle_from_design(Phi0, Phi1, Y, site_id: int = 0, h: int = 1) -> SummaryBundle:
    Phi0 = np.asarray(Phi0, dtype=float)
    Phi1 = np.asarray(Phi1, dtype=float)
    Y = np.asarray(Y, dtype=float)
    return SummaryBundle(
        site_id,
        h,
        Phi0.shape[0],
        Phi0.T @ Phi0,
        Phi0.T @ Phi1,
        Phi1.T @ Phi1,
        Phi0.T @ Y,
        Phi1.T @ Y,
    )


def summarize(dataset: SiteDataset, fmap: FeatureMap, V_next, h: int) -> SummaryBundle:
    """Gram blocks and moments of ``dataset`` at step ``h`` with targets built from ``V_next``."""
    Phi0, Phi1 = build_design(dataset, fmap, h)
    Y = build_targets(dataset, V_next, h)
    return bundle_from_design(Phi0, Phi1, Y, dataset.site_id, h)


def project_homogeneous(bundle: SummaryBundle) -> ProjectedHomogeneousStats:
    """``A = G00 - G01 G11^+ G01^T`` and ``b = v0 - G01 G11^+ v1``.

    Equal to ``Phi0^T (I - P) Phi0`` and ``Phi0^T (I - P) Y`` with ``P`` the
    projector onto the columns of ``Phi1``, but computed from aggregates only.
    """
    G11p = pinv(bundle.G11)
    A = bundle.G00 - bundle.G01 @ G11p @ bundle.G01.T
    A = 0.5 * (A + A.T)
    b = bundle.v0 - bundle.G01 @ (G11p @ bundle.v1)
    return ProjectedHomogeneousStats(bundle.site_id, bundle.h, bundle.n, A, b)
