"""Feature maps phi_0 (homogeneous) and phi_1 (heterogeneous).

A feature map takes a batch of states ``X`` with shape ``(n, state_dim)``
and integer actions ``A`` with shape ``(n,)`` and returns the pair
``(phi0, phi1)`` with shapes ``(n, d0)`` and ``(n, d1)``.

All maps apply the same joint normalization: the stacked raw feature is
divided by ``max(1, ||raw||)`` so that ``||phi0||^2 + ||phi1||^2 <= 1``.
Actions are embedded as the real scalars ``0, 1, ..., action_count - 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.interpolate import BSpline

DOMAIN_TOL = 1e-9


class DomainError(ValueError):
    """A state or action lies outside the feature map's domain."""


class ConfigError(ValueError):
    """A feature map or basis specification is invalid."""


def stack_phi(phi0, phi1) -> np.ndarray:
    """Concatenate homogeneous and heterogeneous features along the last axis."""
    return np.concatenate([np.asarray(phi0, dtype=float), np.asarray(phi1, dtype=float)], axis=-1)


def split_phi(phi, d0: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`stack_phi`."""
    phi = np.asarray(phi, dtype=float)
    return phi[..., :d0], phi[..., d0:]


def _normalize(raw: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    return raw / np.maximum(1.0, norms)


class FeatureMap:
    """Base class. Subclasses implement :meth:`raw_features`."""

    kind: str = "abstract"
    d0: int
    d1: int
    state_dim: int
    action_count: int

    @property
    def d(self) -> int:
        return self.d0 + self.d1

    # subclasses return the un-normalized stacked feature, shape (n, d)
    def raw_features(self, X: np.ndarray, A: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def check_domain(self, X: np.ndarray, A: np.ndarray) -> None:
        low, high = self.state_bounds()
        if X.shape[-1] != self.state_dim:
            raise DomainError(f"expected state dim {self.state_dim}, got {X.shape[-1]}")
        if np.any(X < low - DOMAIN_TOL) or np.any(X > high + DOMAIN_TOL):
            raise DomainError("state outside the feature map's domain box")
        if np.any(A < 0) or np.any(A >= self.action_count):
            raise DomainError(f"action outside 0..{self.action_count - 1}")

    def _prepare(self, X, A) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A = np.atleast_1d(np.asarray(A))
        if A.shape[0] == 1 and X.shape[0] > 1:
            A = np.repeat(A, X.shape[0])
        if np.any(A != np.round(A)):
            raise DomainError("actions must be integers")
        A = A.astype(int)
        self.check_domain(X, A)
        return X, A

    def phi(self, X, A) -> np.ndarray:
        """Stacked normalized features, shape ``(n, d)``."""
        X, A = self._prepare(X, A)
        return _normalize(self.raw_features(X, A))

    def features(self, X, A) -> tuple[np.ndarray, np.ndarray]:
        """Normalized ``(phi0, phi1)`` for a batch."""
        return split_phi(self.phi(X, A), self.d0)

    def phi_all_actions(self, X) -> np.ndarray:
        """Features for every action at every state, shape ``(n, action_count, d)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        Xr = np.repeat(X, self.action_count, axis=0)
        Ar = np.tile(np.arange(self.action_count), n)
        return self.phi(Xr, Ar).reshape(n, self.action_count, self.d)

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


def eval_phi(fmap: FeatureMap, x, a) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``(phi0, phi1)`` at a single state-action pair."""
    phi0, phi1 = fmap.features(np.asarray(x, dtype=float)[None, :], [a])
    return phi0[0], phi1[0]


@dataclass
class _StateBoxMap(FeatureMap):
    m0: int
    m1: int
    action_count: int
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if self.m0 < 0 or self.m1 < 0 or self.m0 + self.m1 == 0:
            raise ConfigError("need m0, m1 >= 0 with m0 + m1 > 0")
        if self.action_count < 1:
            raise ConfigError("action_count must be >= 1")
        if not (np.isfinite(self.low) and np.isfinite(self.high) and self.low < self.high):
            raise ConfigError("domain box must be bounded with low < high")

    @property
    def state_dim(self) -> int:
        return self.m0 + self.m1

    def state_bounds(self):
        return (np.full(self.state_dim, self.low), np.full(self.state_dim, self.high))

    _powers = ()

    def raw_features(self, X, A):
        x0, x1 = X[:, : self.m0], X[:, self.m0 :]
        a = A.astype(float)[:, None]
        parts0 = [x0 * a**p for p in self._powers]
        parts1 = [x1 * a**p for p in self._powers]
        return np.concatenate(parts0 + parts1, axis=1)

    @property
    def d0(self) -> int:
        return len(self._powers) * self.m0

    @property
    def d1(self) -> int:
        return len(self._powers) * self.m1

    def to_dict(self):
        return {
            "kind": self.kind,
            "m0": self.m0,
            "m1": self.m1,
            "action_count": self.action_count,
            "low": self.low,
            "high": self.high,
        }


@dataclass
class LinearActionInteraction(_StateBoxMap):
    """``phi_l(x, a) = (x_l, a * x_l)`` for l = 0, 1."""

    kind = "linear"
    _powers = (0, 1)


@dataclass
class QuadraticActionInteraction(_StateBoxMap):
    """``phi_l(x, a) = (x_l, a * x_l, a^2 * x_l)`` for l = 0, 1."""

    kind = "quadratic"
    _powers = (0, 1, 2)


@dataclass
class TabularFeatureMap(FeatureMap):
    """Feature tables for a finite state space; the state is a 1-vector holding its index.

    ``phi0_table`` has shape ``(n_states, action_count, d0)`` and
    ``phi1_table`` has shape ``(n_states, action_count, d1)``.
    """

    phi0_table: np.ndarray
    phi1_table: np.ndarray
    kind = "tabular"

    def __post_init__(self):
        self.phi0_table = np.asarray(self.phi0_table, dtype=float)
        self.phi1_table = np.asarray(self.phi1_table, dtype=float)
        if self.phi0_table.shape[:2] != self.phi1_table.shape[:2]:
            raise ConfigError("phi0 and phi1 tables disagree on (n_states, action_count)")

    @property
    def n_states(self) -> int:
        return self.phi0_table.shape[0]

    @property
    def action_count(self) -> int:
        return self.phi0_table.shape[1]

    @property
    def d0(self) -> int:
        return self.phi0_table.shape[2]

    @property
    def d1(self) -> int:
        return self.phi1_table.shape[2]

    state_dim = 1

    def state_bounds(self):
        return np.zeros(1), np.full(1, self.n_states - 1.0)

    def check_domain(self, X, A):
        super().check_domain(X, A)
        if np.any(X != np.round(X)):
            raise DomainError("tabular states must be integer indices")

    def raw_features(self, X, A):
        s = X[:, 0].astype(int)
        return np.concatenate([self.phi0_table[s, A], self.phi1_table[s, A]], axis=1)

    def table(self) -> np.ndarray:
        """Normalized stacked features for every (state, action), shape ``(S, A, d)``."""
        raw = np.concatenate([self.phi0_table, self.phi1_table], axis=2)
        return _normalize(raw)

    def to_dict(self):
        return {
            "kind": self.kind,
            "phi0_table": self.phi0_table.tolist(),
            "phi1_table": self.phi1_table.tolist(),
        }


# ---------------------------------------------------------------------------
# basis expansions


@dataclass
class BasisSpec:
    """Tensor-product basis description.

    ``counts`` holds one basis count per state coordinate followed by one
    for the action coordinate. The first ``m0`` state coordinates feed the
    homogeneous part, the rest the heterogeneous part; both parts also
    expand the action.
    """

    family: str
    counts: tuple[int, ...]
    m0: int
    action_count: int
    degree: int = 3
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if self.family not in ("bspline", "fourier"):
            raise ConfigError(f"unknown basis family {self.family!r}")
        if not (math.isfinite(self.low) and math.isfinite(self.high)) or self.low >= self.high:
            raise ConfigError("basis domain must be a bounded interval with low < high")
        if any(c < 1 for c in self.counts):
            raise ConfigError("basis counts must be >= 1")
        if len(self.counts) < 2 or not 0 <= self.m0 <= len(self.counts) - 1:
            raise ConfigError("counts must list each state coordinate and the action")

    @property
    def state_dim(self) -> int:
        return len(self.counts) - 1


def bspline_basis(x, count: int, degree: int, low: float, high: float) -> np.ndarray:
    """Clamped uniform B-spline basis of ``count`` functions, shape ``(n, count)``.

    The degree is lowered to ``count - 1`` when there are too few functions.
    """
    x = np.clip(np.asarray(x, dtype=float), low, high)
    k = min(degree, count - 1)
    if k == 0 and count == 1:
        return np.ones((x.shape[0], 1))
    n_interior = count - k - 1
    interior = np.linspace(low, high, n_interior + 2)[1:-1]
    knots = np.r_[[low] * (k + 1), interior, [high] * (k + 1)]
    return BSpline.design_matrix(x, knots, k).toarray()


def fourier_basis(x, count: int, low: float, high: float) -> np.ndarray:
    """``1, cos(2 pi u), sin(2 pi u), cos(4 pi u), ...`` with ``u`` rescaled to [0, 1]."""
    u = (np.asarray(x, dtype=float) - low) / (high - low)
    cols = [np.ones_like(u)]
    freq = 1
    while len(cols) < count:
        cols.append(np.cos(2 * np.pi * freq * u))
        if len(cols) < count:
            cols.append(np.sin(2 * np.pi * freq * u))
        freq += 1
    return np.stack(cols, axis=1)


def _tensor(columns: list[np.ndarray]) -> np.ndarray:
    out = columns[0]
    for c in columns[1:]:
        out = (out[:, :, None] * c[:, None, :]).reshape(out.shape[0], -1)
    return out


@dataclass
class TensorBasis(FeatureMap):
    """Tensor-product B-spline or Fourier bases over ``(x0, a)`` and ``(x1, a)``."""

    spec: BasisSpec
    kind = "tensor"

    @property
    def m0(self) -> int:
        return self.spec.m0

    @property
    def state_dim(self) -> int:
        return self.spec.state_dim

    @property
    def action_count(self) -> int:
        return self.spec.action_count

    @property
    def d0(self) -> int:
        return self._part_dim(range(self.m0))

    @property
    def d1(self) -> int:
        return self._part_dim(range(self.m0, self.state_dim))

    def _part_dim(self, coords) -> int:
        coords = list(coords)
        if not coords:
            return 0
        return int(np.prod([self.spec.counts[c] for c in coords])) * self.spec.counts[-1]

    def state_bounds(self):
        return (np.full(self.state_dim, self.spec.low), np.full(self.state_dim, self.spec.high))

    def _univariate(self, values, count, low, high, degree):
        if self.spec.family == "bspline":
            return bspline_basis(values, count, degree, low, high)
        return fourier_basis(values, count, low, high)

    def raw_basis(self, X, A) -> tuple[np.ndarray, np.ndarray]:
        """Un-normalized homogeneous and heterogeneous basis values."""
        s = self.spec
        a_hi = max(s.action_count - 1, 1)
        # degree-1 splines on the action grid give one-hot action indicators
        a_deg = 1 if s.family == "bspline" else s.degree
        a_cols = self._univariate(A.astype(float), s.counts[-1], 0.0, float(a_hi), a_deg)
        state_cols = [
            self._univariate(X[:, c], s.counts[c], s.low, s.high, s.degree) for c in range(s.state_dim)
        ]
        n = X.shape[0]
        part0 = _tensor(state_cols[: s.m0] + [a_cols]) if s.m0 else np.zeros((n, 0))
        part1 = _tensor(state_cols[s.m0 :] + [a_cols]) if s.state_dim > s.m0 else np.zeros((n, 0))
        return part0, part1

    def raw_features(self, X, A):
        return stack_phi(*self.raw_basis(X, A))

    def to_dict(self):
        s = self.spec
        return {
            "kind": self.kind,
            "family": s.family,
            "counts": list(s.counts),
            "m0": s.m0,
            "action_count": s.action_count,
            "degree": s.degree,
            "low": s.low,
            "high": s.high,
        }


def build_tensor_basis(spec: BasisSpec) -> TensorBasis:
    """Feature map whose parts span tensor bases of ``(x0, a)`` and ``(x1, a)``."""
    return TensorBasis(spec)


def basis_count_for_rate(N: int, m: int, q: int, c: float = 1.0) -> int:
    """Basis count ``ceil(c * N ** (m / (2 (m + q + 1))))`` from the nonparametric rate."""
    value = c * float(N) ** (m / (2.0 * (m + q + 1)))
    return max(1, math.ceil(value - 1e-9))


def feature_map_from_dict(data: dict[str, Any]) -> FeatureMap:
    """Rebuild a map serialized with ``to_dict``."""
    data = dict(data)
    kind = data.pop("kind", None)
    if kind == "linear":
        return LinearActionInteraction(**data)
    if kind == "quadratic":
        return QuadraticActionInteraction(**data)
    if kind == "tabular":
        return TabularFeatureMap(np.asarray(data["phi0_table"]), np.asarray(data["phi1_table"]))
    if kind == "tensor":
        return TensorBasis(BasisSpec(**data))
    raise ConfigError(f"unknown feature map kind {kind!r}")
