"""Closed-form preservation–memorization editors.

Three ways to compute a weight update Δ for a down-projection W0 given
preserved-key statistics C0 and a batch of (key, value) edit pairs:

* rome:  single fact, exact memorization, rank-one Δ.
* memit: batched least-squares trade-off — λ weights preservation against
         memorization; memorization is approximate.
* emmet: batched equality-constrained preservation — exact memorization for
         ridge=0, with an optional ridge on the E×E Gram when keys are
         nearly dependent.

All editors are pure: they return Δ and never touch a model.  An
independent KKT solver (emmet_oracle_kkt) recomputes the equality-
constrained solution from stationarity conditions through the general LU
path, sharing no code with the closed form, so the two can cross-check each
other in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateKey,
    DimensionMismatch,
    DuplicateKeys,
    InvalidConfig,
    NotSPD,
    SingularGram,
)
from .numerics import as_matrix, as_vector, frobenius, solve_general, solve_spd

# k'C0^{-1}k at or below this is a degenerate (unusable) edit key.
DEGENERATE_KEY_TOL = 1e-12
# Cosine similarity above 1 - this marks two edit keys as duplicates.
DUPLICATE_COS_TOL = 1e-8

_ALGORITHMS = ("rome", "memit", "emmet")


@dataclass(frozen=True)
class EditBatchMatrices:
    """Stacked edit keys K_E (d_ffn × E) and target values V_E (d_model × E)."""

    K_E: np.ndarray
    V_E: np.ndarray
    fact_ids: tuple = ()

    def __post_init__(self):
        K = as_matrix(self.K_E, "K_E")
        V = as_matrix(self.V_E, "V_E")
        if K.shape[1] != V.shape[1]:
            raise DimensionMismatch(
                f"K_E has {K.shape[1]} columns but V_E has {V.shape[1]}"
            )
        if K.shape[1] < 1:
            raise DimensionMismatch("edit batch must contain at least one fact")
        ids = tuple(self.fact_ids) if self.fact_ids else tuple(range(K.shape[1]))
        if len(ids) != K.shape[1]:
            raise DimensionMismatch(
                f"{len(ids)} fact_ids for {K.shape[1]} batch columns"
            )
        if len(set(ids)) != len(ids):
            raise InvalidConfig("fact_ids must be unique within a batch")
        object.__setattr__(self, "K_E", K)
        object.__setattr__(self, "V_E", V)
        object.__setattr__(self, "fact_ids", ids)

    @property
    def batch_size(self) -> int:
        return self.K_E.shape[1]


@dataclass(frozen=True)
class EditDelta:
    delta: np.ndarray  # d_model × d_ffn
    algorithm: str
    lam: float  # MEMIT preservation weight, or EMMET Gram ridge; 0 for ROME
    batch_size: int

    def __post_init__(self):
        if self.algorithm not in _ALGORITHMS:
            raise InvalidConfig(f"algorithm must be one of {_ALGORITHMS}")
        object.__setattr__(self, "delta", as_matrix(self.delta, "delta"))


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """The two Frobenius terms of the preservation–memorization objective."""

    preservation: float  # ||W_hat K0 - W0 K0||_F
    memorization: float  # ||W_hat K_E - V_E||_F
    lam: float

    @property
    def weighted_total(self) -> float:
        return self.lam * self.preservation**2 + self.memorization**2


def _check_w0_c0(w0, c0) -> tuple[np.ndarray, np.ndarray]:
    W0 = as_matrix(w0, "W0")
    C0 = as_matrix(c0, "C0")
    if C0.shape[0] != C0.shape[1]:
        raise DimensionMismatch(f"C0 must be square, got {C0.shape}")
    if W0.shape[1] != C0.shape[0]:
        raise DimensionMismatch(
            f"W0 has {W0.shape[1]} columns but C0 is {C0.shape[0]}x{C0.shape[1]}"
        )
    return W0, C0


def _check_batch(W0: np.ndarray, C0: np.ndarray, batch: EditBatchMatrices) -> None:
    if batch.K_E.shape[0] != C0.shape[0]:
        raise DimensionMismatch(
            f"K_E rows {batch.K_E.shape[0]} do not match C0 dim {C0.shape[0]}"
        )
    if batch.V_E.shape[0] != W0.shape[0]:
        raise DimensionMismatch(
            f"V_E rows {batch.V_E.shape[0]} do not match W0 rows {W0.shape[0]}"
        )


def _reject_duplicate_keys(batch: EditBatchMatrices) -> None:
    K = batch.K_E
    norms = np.linalg.norm(K, axis=0)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateKey(f"edit key {batch.fact_ids[zero[0]]} is the zero vector")
    if K.shape[1] < 2:
        return
    unit = K / norms
    cos = np.abs(unit.T @ unit)
    np.fill_diagonal(cos, 0.0)
    i, j = np.unravel_index(int(np.argmax(cos)), cos.shape)
    if cos[i, j] > 1.0 - DUPLICATE_COS_TOL:
        raise DuplicateKeys(
            f"edit keys {batch.fact_ids[i]} and {batch.fact_ids[j]} are parallel "
            f"(|cos| = {cos[i, j]:.12f}); equality constraints would be inconsistent"
        )


def rome_delta(w0, c0, k_e, v_e) -> EditDelta:
    """Rank-one exact-memorization update for a single fact.

    Δ = (v_e − W0 k_e) · (k_eᵀ C0⁻¹) / (k_eᵀ C0⁻¹ k_e)
    """
    W0, C0 = _check_w0_c0(w0, c0)
    k = as_vector(k_e, "k_e")
    v = as_vector(v_e, "v_e")
    if k.shape[0] != C0.shape[0]:
        raise DimensionMismatch(f"k_e has dim {k.shape[0]}, C0 is {C0.shape[0]}")
    if v.shape[0] != W0.shape[0]:
        raise DimensionMismatch(f"v_e has dim {v.shape[0]}, W0 has {W0.shape[0]} rows")
    cinv_k = solve_spd(C0, k)
    denom = float(k @ cinv_k)
    if denom <= DEGENERATE_KEY_TOL:
        raise DegenerateKey(
            f"k'C0^-1 k = {denom:.3e} <= {DEGENERATE_KEY_TOL}; key carries no signal"
        )
    residual = v - W0 @ k
    delta = np.outer(residual, cinv_k) / denom
    return EditDelta(delta=delta, algorithm="rome", lam=0.0, batch_size=1)


def memit_delta(w0, c0, batch: EditBatchMatrices, lam: float) -> EditDelta:
    """Batched least-squares update Δ = (V_E − W0 K_E)·K_Eᵀ·(λC0 + K_E K_Eᵀ)⁻¹.

    λ > 0 keeps the solve SPD for any batch; λ = 0 demands K_E of full row
    rank d_ffn (otherwise the normal matrix is singular and NotSPD is raised).
    """
    W0, C0 = _check_w0_c0(w0, c0)
    _check_batch(W0, C0, batch)
    if lam < 0.0 or not np.isfinite(lam):
        raise InvalidConfig(f"lambda must be finite and >= 0, got {lam}")
    K, V = batch.K_E, batch.V_E
    d_ffn = K.shape[0]
    if lam == 0.0 and (K.shape[1] < d_ffn or np.linalg.matrix_rank(K) < d_ffn):
        raise NotSPD(
            "lambda=0 requires K_E of full row rank d_ffn; "
            "the normal matrix K_E K_E' is singular"
        )
    normal = lam * C0 + K @ K.T
    normal = 0.5 * (normal + normal.T)
    # Δ = R K' N^{-1}; with N symmetric this is R (N^{-1} K)'.
    ninv_k = solve_spd(normal, K)
    residual = V - W0 @ K
    delta = residual @ ninv_k.T
    return EditDelta(delta=delta, algorithm="memit", lam=float(lam), batch_size=batch.batch_size)


def emmet_delta(w0, c0, batch: EditBatchMatrices, ridge: float = 0.0) -> EditDelta:
    """Equality-constrained batched update.

    Δ = (V_E − W0 K_E)·(K_Eᵀ C0⁻¹ K_E + ridge·I)⁻¹·K_Eᵀ C0⁻¹.  With ridge=0
    memorization is exact; the ridge trades a little of it for conditioning
    when edit keys are nearly dependent.
    """
    W0, C0 = _check_w0_c0(w0, c0)
    _check_batch(W0, C0, batch)
    if ridge < 0.0 or not np.isfinite(ridge):
        raise InvalidConfig(f"ridge must be finite and >= 0, got {ridge}")
    K, V = batch.K_E, batch.V_E
    if batch.batch_size > K.shape[0]:
        raise SingularGram(
            f"batch of {batch.batch_size} exceeds d_ffn={K.shape[0]}; "
            "the Gram matrix cannot have full rank"
        )
    _reject_duplicate_keys(batch)
    cinv_k = solve_spd(C0, K)  # C0^{-1} K_E
    gram = K.T @ cinv_k
    gram = 0.5 * (gram + gram.T)
    if ridge > 0.0:
        gram = gram + ridge * np.eye(gram.shape[0])
    try:
        # Δ = R G^{-1} (C0^{-1}K)'; solve G X = (C0^{-1}K)' for X.
        ginv_kct = solve_spd(gram, cinv_k.T)
    except NotSPD as exc:
        raise SingularGram(
            f"edit-key Gram is not positive definite ({exc}); "
            "raise the ridge or drop near-parallel keys"
        ) from None
    residual = V - W0 @ K
    delta = residual @ ginv_kct
    return EditDelta(delta=delta, algorithm="emmet", lam=float(ridge), batch_size=batch.batch_size)


def emmet_oracle_kkt(w0, c0, batch: EditBatchMatrices) -> np.ndarray:
    """First-principles solution of the equality-constrained objective.

    Solves, independently for every row r of Δ with multipliers μ,

        [ C0   -K_E ] [ rᵀ ]   [ 0   ]
        [ K_Eᵀ   0  ] [ μ  ] = [ rhs ]

    assembled as one dense system and handed to the general LU solver.  This
    deliberately shares no code with emmet_delta so the two act as mutual
    checks.
    """
    W0, C0 = _check_w0_c0(w0, c0)
    _check_batch(W0, C0, batch)
    K, V = batch.K_E, batch.V_E
    d_ffn, E = K.shape
    kkt = np.zeros((d_ffn + E, d_ffn + E))
    kkt[:d_ffn, :d_ffn] = C0
    kkt[:d_ffn, d_ffn:] = -K
    kkt[d_ffn:, :d_ffn] = K.T
    rhs = np.zeros((d_ffn + E, W0.shape[0]))
    rhs[d_ffn:, :] = (V - W0 @ K).T
    solution = solve_general(kkt, rhs)
    return solution[:d_ffn, :].T


def pm_objective(w0, w_hat, k0, batch: EditBatchMatrices, lam: float) -> ObjectiveBreakdown:
    """Evaluate both objective terms at a candidate edited weight."""
    W0 = as_matrix(w0, "W0")
    W_hat = as_matrix(w_hat, "W_hat")
    K0 = as_matrix(k0, "K0")
    if W_hat.shape != W0.shape:
        raise DimensionMismatch(f"W_hat shape {W_hat.shape} != W0 shape {W0.shape}")
    if K0.shape[0] != W0.shape[1]:
        raise DimensionMismatch(
            f"K0 rows {K0.shape[0]} do not match W0 columns {W0.shape[1]}"
        )
    if batch.K_E.shape[0] != W0.shape[1] or batch.V_E.shape[0] != W0.shape[0]:
        raise DimensionMismatch("edit batch does not match W0 shape")
    preservation = frobenius((W_hat - W0) @ K0)
    memorization = frobenius(W_hat @ batch.K_E - batch.V_E)
    return ObjectiveBreakdown(
        preservation=preservation, memorization=memorization, lam=float(lam)
    )
