"""Small dense linear-algebra kernel used by the editors.

Everything works on plain float64 numpy arrays and goes through LAPACK:
Cholesky for symmetric positive definite solves, partially pivoted LU for
general solves, SVD (small) or column-pivoted QR (large) for numerical rank.
All functions are pure and never modify their inputs.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NotSPD, Singular

# Relative tolerance for the symmetry precondition of solve_spd.
SYMMETRY_RTOL = 1e-10
# An LU pivot below SINGULAR_RTOL * max|A| means A is treated as singular.
SINGULAR_RTOL = 1e-12
# Default relative cutoff for numerical_rank.
RANK_RTOL = 1e-8
# Above this dimension, rank counting switches from SVD to pivoted QR.
_SVD_MAX_DIM = 64


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def frobenius(a) -> float:
    """Frobenius norm (2-norm for vectors)."""
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def _check_rhs(a: np.ndarray, b, name: str) -> tuple[np.ndarray, bool]:
    rhs = np.asarray(b, dtype=np.float64)
    if rhs.ndim == 1:
        rhs2, was_vector = rhs[:, None], True
    elif rhs.ndim == 2:
        rhs2, was_vector = rhs, False
    else:
        raise DimensionMismatch(f"{name} must be 1-D or 2-D, got shape {rhs.shape}")
    if not np.all(np.isfinite(rhs2)):
        raise ValueError(f"{name} contains non-finite entries")
    if rhs2.shape[0] != a.shape[0]:
        raise DimensionMismatch(
            f"row mismatch: matrix is {a.shape[0]}x{a.shape[1]}, {name} has {rhs2.shape[0]} rows"
        )
    return rhs2, was_vector


def solve_spd(a, b) -> np.ndarray:
    """Solve A X = B for symmetric positive definite A via Cholesky.

    B may be a vector or a matrix; the result has the same rank.
    Raises NotSPD when A is asymmetric beyond tolerance or a Cholesky pivot
    is non-positive (the caller should raise its ridge), DimensionMismatch
    on shape errors.
    """
    A = as_matrix(a, "A")
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    B, was_vector = _check_rhs(A, b, "B")
    scale = float(np.abs(A).max()) if A.size else 0.0
    if scale > 0.0 and float(np.abs(A - A.T).max()) > SYMMETRY_RTOL * scale:
        raise NotSPD("matrix is not symmetric within tolerance")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotSPD(f"Cholesky failed: {exc}") from None
    x = scipy.linalg.cho_solve(factor, B, check_finite=False)
    return x[:, 0] if was_vector else x


def solve_general(a, b) -> np.ndarray:
    """Solve A X = B for square nonsingular A via partially pivoted LU.

    Raises Singular when the smallest pivot falls below
    SINGULAR_RTOL * max|A|, DimensionMismatch on shape errors.
    """
    A = as_matrix(a, "A")
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    B, was_vector = _check_rhs(A, b, "B")
    with warnings.catch_warnings():
        # scipy warns on exactly-zero pivots; the explicit check below decides.
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
    pivots = np.abs(np.diag(lu))
    threshold = SINGULAR_RTOL * float(np.abs(A).max())
    if pivots.size and float(pivots.min()) <= threshold:
        raise Singular(f"pivot {pivots.min():.3e} below threshold {threshold:.3e}")
    x = scipy.linalg.lu_solve((lu, piv), B, check_finite=False)
    return x[:, 0] if was_vector else x


def numerical_rank(m, tol: float = RANK_RTOL) -> int:
    """Count singular values above ``tol`` times the largest one.

    Uses full SVD for matrices with both dimensions <= 64 and column-pivoted
    QR (with |R_ii| standing in for the singular values) above that.
    Returns 0 for the zero matrix.
    """
    M = as_matrix(m, "M")
    if tol <= 0.0:
        raise ValueError(f"tol must be positive, got {tol}")
    if M.size == 0:
        return 0
    if max(M.shape) <= _SVD_MAX_DIM:
        sv = np.linalg.svd(M, compute_uv=False)
        smax = float(sv[0])
        if smax == 0.0:
            return 0
        return int(np.count_nonzero(sv > tol * smax))
    r = scipy.linalg.qr(M, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(r))
    dmax = float(diag[0]) if diag.size else 0.0
    if dmax == 0.0:
        return 0
    return int(np.count_nonzero(diag > tol * dmax))
