"""Dense float64 kernels: SPD solves, pseudo-inverse quadratic forms and
subsampling diagnostics (coherence, condition number).

Everything here works on plain ``numpy`` arrays. An index set is a sorted,
strictly increasing ``int64`` array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import (
    InvalidArgument,
    NotPositiveDefinite,
    NumericalBreakdown,
    RankDeficient,
    ShapeError,
)

SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class SpdOperator:
    """Matrix-free symmetric positive (semi-)definite operator."""

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.apply(v)

    @classmethod
    def from_matrix(cls, M: np.ndarray, damping: float = 0.0) -> "SpdOperator":
        M = np.asarray(M, dtype=np.float64)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ShapeError(f"expected a square matrix, got {M.shape}")
        if damping:
            return cls(M.shape[0], lambda v: M @ v + damping * v)
        return cls(M.shape[0], lambda v: M @ v)


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    n_iter: int
    rel_residual: float


def cg_solve(
    op: SpdOperator,
    rhs: np.ndarray,
    tol: float = 1e-8,
    max_iter: Optional[int] = None,
) -> CGResult:
    """Conjugate gradients for ``op(x) = rhs``.

    Stops when the recursively updated residual satisfies
    ``||r|| <= tol * ||rhs||`` and then confirms with an explicit residual.
    If the budget runs out, the iterate with the smallest residual seen is
    returned with ``converged=False``.
    """
    b = np.asarray(rhs, dtype=np.float64)
    if b.ndim != 1 or b.shape[0] != op.dim:
        raise ShapeError(f"rhs has shape {b.shape}, operator dimension is {op.dim}")
    if tol <= 0:
        raise InvalidArgument("tol must be positive")
    if max_iter is None:
        max_iter = 10 * op.dim

    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return CGResult(x, True, 0, 0.0)

    r = b.copy()
    p = r.copy()
    rs = r @ r
    best_x, best_res = x.copy(), 1.0
    target = tol * bnorm
    for k in range(1, max_iter + 1):
        Ap = op(p)
        pAp = p @ Ap
        if not np.isfinite(pAp):
            raise NumericalBreakdown("non-finite curvature p'Ap in CG")
        if pAp <= 0.0:
            # operator is not SPD along p; the current iterate is the best we have
            break
        alpha = rs / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = r @ r
        if not np.isfinite(rs_new):
            raise NumericalBreakdown("non-finite residual in CG")
        res = np.sqrt(rs_new)
        if res / bnorm < best_res:
            best_x, best_res = x.copy(), res / bnorm
        if res <= target:
            true_res = np.linalg.norm(op(x) - b)
            if true_res <= target:
                return CGResult(x, True, k, true_res / bnorm)
            # drifted recursive residual: restart from the explicit one
            r = b - op(x)
            p = r.copy()
            rs = r @ r
            continue
        p = r + (rs_new / rs) * p
        rs = rs_new
    true_res = np.linalg.norm(op(best_x) - b) / bnorm
    return CGResult(best_x, bool(true_res <= tol), max_iter, true_res)


def _check_symmetric(M: np.ndarray) -> None:
    scale = max(np.max(np.abs(M)), 1.0)
    if np.max(np.abs(M - M.T)) > SYMMETRY_TOL * scale:
        raise InvalidArgument("matrix is not symmetric within tolerance")


def cholesky_factor(M: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"expected a square matrix, got {M.shape}")
    _check_symmetric(M)
    try:
        return scipy.linalg.cholesky(M, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def cholesky_solve(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    L = cholesky_factor(M)
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != M.shape[0]:
        raise ShapeError(f"rhs has {rhs.shape[0]} rows, matrix has {M.shape[0]}")
    return scipy.linalg.cho_solve((L, True), rhs)


def _singular_values(A: np.ndarray) -> np.ndarray:
    return np.linalg.svd(A, compute_uv=False)


def pinv_quadratic_form(
    A: np.ndarray, B: np.ndarray, strict: bool = True, rcond: float = 1e-12
) -> np.ndarray:
    """``B^T (A A^T)^+ B`` through the least-squares solution ``X = A^+ B``.

    The pseudo-inverse of ``A A^T`` is never formed: ``(A A^T)^+ =
    (A^+)^T A^+`` so the form equals ``X^T X`` for the minimum-norm
    least-squares solution ``X`` of ``A X = B``.

    With ``strict=True`` a rank-deficient ``A`` raises ``RankDeficient``;
    otherwise singular values below ``rcond * s_max`` are truncated.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ShapeError(f"incompatible shapes {A.shape} and {B.shape}")
    if strict:
        s = _singular_values(A)
        if A.shape[1] > A.shape[0] or s[-1] < 1e-12 * s[0]:
            raise RankDeficient("A does not have full column rank")
    X, *_ = np.linalg.lstsq(A, B, rcond=rcond)
    Q = X.T @ X
    return 0.5 * (Q + Q.T)


def leverage_scores(A: np.ndarray) -> np.ndarray:
    """Squared row norms of an orthonormal basis for range(A) via thin QR."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < A.shape[1]:
        raise ShapeError(f"expected a tall matrix, got {A.shape}")
    Q, R = np.linalg.qr(A, mode="reduced")
    s = _singular_values(R)
    if s[-1] < 1e-12 * s[0]:
        raise RankDeficient("A does not have full column rank")
    return np.einsum("ij,ij->i", Q, Q)


def coherence(A: np.ndarray) -> float:
    """Largest leverage score of a tall full-rank matrix; lies in [k/p, 1]."""
    return float(np.max(leverage_scores(A)))


def condition_number(A: np.ndarray) -> float:
    A = np.asarray(A, dtype=np.float64)
    s = _singular_values(A)
    if s[0] == 0.0 or s[-1] < 1e-14 * s[0]:
        raise RankDeficient("matrix is numerically rank deficient")
    return float(s[0] / s[-1])


def as_index_set(indices, p: int) -> np.ndarray:
    """Validate and normalise an index set against a parameter count ``p``."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        raise InvalidArgument("index set must be non-empty")
    if np.any(np.diff(idx) <= 0):
        raise InvalidArgument("index set must be strictly increasing")
    if idx[0] < 0 or idx[-1] >= p:
        raise InvalidArgument(f"index out of range for p={p}")
    return idx


def sample_uniform_indices(p: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` distinct indices drawn uniformly without replacement, sorted."""
    if not 1 <= m <= p:
        raise InvalidArgument(f"need 1 <= m <= p, got m={m}, p={p}")
    if m == p:
        return np.arange(p, dtype=np.int64)
    return np.sort(rng.choice(p, size=m, replace=False)).astype(np.int64)
