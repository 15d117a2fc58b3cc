"""Dense linear-algebra kernels shared by the estimators.

Every function here is pure: no randomness, no module state.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg as sla

PINV_RTOL = 1e-10


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization fails even after jitter."""


def _check_finite(*arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise ValueError("matrix contains NaN or Inf entries")


def spd_solve(A, B) -> np.ndarray:
    """Solve ``A X = B`` for a symmetric positive definite ``A``.

    Uses a Cholesky factorization. If it fails, a single retry is made
    with ``1e-10 * trace(A) / dim`` added to the diagonal.

    Parameters
    ----------
    A : array_like, shape (d, d)
        Symmetric positive definite matrix.
    B : array_like, shape (d,) or (d, m)
        Right-hand side(s).

    Returns
    -------
    numpy.ndarray
        Solution with the same shape as ``B``.

    Raises
    ------
    NotPositiveDefinite
        If the jittered retry also fails.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    _check_finite(A, B)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    try:
        factor = sla.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        dim = A.shape[0]
        jitter = 1e-10 * np.trace(A) / dim
        try:
            factor = sla.cho_factor(A + jitter * np.eye(dim), lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("matrix is not positive definite") from exc
    return sla.cho_solve(factor, B, check_finite=False)


def spd_inverse(A) -> np.ndarray:
    """Inverse of an SPD matrix, symmetrized to remove round-off skew."""
    A = np.asarray(A, dtype=float)
    inv = spd_solve(A, np.eye(A.shape[0]))
    return 0.5 * (inv + inv.T)


def pinv(A, rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse by SVD.

    Singular values below ``rtol * sigma_max`` are treated as zero.
    """
    A = np.asarray(A, dtype=float)
    _check_finite(A)
    if A.size == 0:
        return np.zeros(A.shape[::-1])
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(A.shape[::-1])
    keep = s > rtol * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def projector_onto_columns(B) -> np.ndarray:
    """Orthogonal projector ``B (B^T B)^+ B^T`` onto the column space of ``B``."""
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if B.shape[1] < 1:
        raise ValueError("B needs at least one column")
    P = B @ pinv(B.T @ B) @ B.T
    return 0.5 * (P + P.T)


def min_eigenvalue(A) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    A = np.asarray(A, dtype=float)
    _check_finite(A)
    return float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])


def penrose_residuals(A, A_pinv) -> tuple[float, float, float, float]:
    """Max-abs residuals of the four Penrose conditions."""
    A = np.asarray(A, dtype=float)
    X = np.asarray(A_pinv, dtype=float)
    return (
        float(np.max(np.abs(A @ X @ A - A), initial=0.0)),
        float(np.max(np.abs(X @ A @ X - X), initial=0.0)),
        float(np.max(np.abs((A @ X).T - A @ X), initial=0.0)),
        float(np.max(np.abs((X @ A).T - X @ A), initial=0.0)),
    )
