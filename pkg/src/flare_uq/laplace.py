"""Gauss-Newton curvature over a parameter index set and the damped
posterior covariance operator scale * (H + lambda I)^{-1}."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .datasets import Dataset
from .denoiser import DenoiserModel
from .diffusion import DiffusionSchedule
from .errors import InvalidArgument, NumericalBreakdown, ResourceLimit, ShapeError
from .linalg import SpdOperator, as_index_set, cg_solve, cholesky_factor

DEFAULT_DAMPING = 1e-6
DENSE_LIMIT = 4096
DEFAULT_PAIRS = 512
MEMORY_BUDGET_BYTES = 2 * 1024 ** 3
KINDS = ("full", "subnet", "last_layer", "zero")


@dataclass
class GgnMatrix:
    indices: np.ndarray
    H: np.ndarray
    n_pairs: int

    @property
    def m(self) -> int:
        return self.indices.size


def draw_pairs(dataset: Dataset, sched: DiffusionSchedule, n_pairs: int, rng):
    """Training inputs noised to a uniform random step (fresh noise)."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    rows = rng.integers(0, dataset.n, size=n_pairs)
    t = rng.integers(1, sched.T + 1, size=n_pairs)
    eps = rng.standard_normal((n_pairs, dataset.dim))
    ab = sched.bar_alpha[t][:, None]
    x_t = np.sqrt(ab) * dataset.samples[rows] + np.sqrt(1.0 - ab) * eps
    return x_t, t


def ggn_from_jacobians(J_pop: np.ndarray, n_pairs: int) -> np.ndarray:
    """(1/n) J_pop^T J_pop for a stacked (n*d, m) Jacobian."""
    H = J_pop.T @ J_pop / n_pairs
    return 0.5 * (H + H.T)


def assemble_ggn(model: DenoiserModel, dataset: Dataset, sched: DiffusionSchedule,
                 indices=None, n_pairs: int = DEFAULT_PAIRS, rng=0,
                 chunk: int = 64, pairs=None) -> GgnMatrix:
    """H = (1/n) sum_i J_{i,I}^T J_{i,I} over ``n_pairs`` noised training pairs.

    ``pairs`` may supply (x_t, t) directly instead of drawing them.
    """
    idx = np.arange(model.p) if indices is None else as_index_set(indices, model.p)
    m = idx.size
    need = 8 * m * m * 2 + 8 * chunk * model.d * m
    if need > MEMORY_BUDGET_BYTES:
        raise ResourceLimit(
            f"GGN over {m} parameters needs ~{need / 2**30:.1f} GiB; limit is "
            f"{MEMORY_BUDGET_BYTES / 2**30:.1f} GiB")
    if n_pairs < 1:
        raise InvalidArgument("need at least one curvature pair")
    if pairs is None:
        x_t, t = draw_pairs(dataset, sched, n_pairs, rng)
    else:
        x_t, t = pairs
        n_pairs = x_t.shape[0]
    plan = model.plan(idx)
    H = np.zeros((m, m))
    for s in range(0, n_pairs, chunk):
        J = model.jacobian_batch(x_t[s:s + chunk], t[s:s + chunk], plan)
        J = J.reshape(-1, m)
        H += J.T @ J
    H /= n_pairs
    H = 0.5 * (H + H.T)
    return GgnMatrix(idx, H, n_pairs)


def _block_cg(A: np.ndarray, damping: float, R: np.ndarray, tol: float = 1e-8,
              max_iter: Optional[int] = None) -> np.ndarray:
    """Solve (A + damping I) Z = R column by column, vectorised over columns."""
    m, k = R.shape
    max_iter = 10 * m if max_iter is None else max_iter
    Z = np.zeros_like(R)
    Res = R.copy()
    P = Res.copy()
    rs = np.einsum("ij,ij->j", Res, Res)
    target = (tol ** 2) * rs
    active = rs > target
    for _ in range(max_iter):
        if not active.any():
            break
        AP = A @ P + damping * P
        pAp = np.einsum("ij,ij->j", P, AP)
        if not np.all(np.isfinite(pAp)):
            raise NumericalBreakdown("non-finite curvature in block CG")
        alpha = np.where(active, rs / np.where(pAp > 0, pAp, 1.0), 0.0)
        Z += alpha * P
        Res -= alpha * AP
        rs_new = np.einsum("ij,ij->j", Res, Res)
        beta = np.where(active, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        P = Res + beta * P
        rs = rs_new
        active = rs > target
    return Z


class PosteriorOperator:
    """Sigma = scale * (H + lambda I)^{-1} over an index set.

    A Cholesky factor is kept when m <= ``dense_limit``; otherwise solves go
    through conjugate gradients.
    """

    def __init__(self, ggn: GgnMatrix, damping: float = DEFAULT_DAMPING, kind: str = "subnet",
                 scale: float = 1.0, dense_limit: int = DENSE_LIMIT):
        if damping <= 0:
            raise InvalidArgument("damping must be positive")
        if kind not in KINDS:
            raise InvalidArgument(f"unknown posterior kind {kind!r}")
        if scale < 0:
            raise InvalidArgument("scale must be non-negative")
        self.ggn = ggn
        self.kind = kind
        self.damping = float(damping)
        self.scale = float(scale)
        self.dense_limit = dense_limit
        self._L = None
        self._Linv = None
        if kind != "zero" and self.m <= dense_limit:
            self._L = cholesky_factor(ggn.H + self.damping * np.eye(self.m))

    @classmethod
    def zero(cls, indices) -> "PosteriorOperator":
        """Test double with Sigma = 0 (the lambda -> infinity limit)."""
        idx = np.asarray(indices, dtype=np.int64)
        return cls(GgnMatrix(idx, np.zeros((idx.size, idx.size)), 1), kind="zero", scale=0.0)

    @property
    def indices(self) -> np.ndarray:
        return self.ggn.indices

    @property
    def m(self) -> int:
        return self.ggn.m

    @property
    def is_dense(self) -> bool:
        return self._L is not None

    def _solve(self, R: np.ndarray) -> np.ndarray:
        if self._L is not None:
            return scipy.linalg.cho_solve((self._L, True), R)
        if R.ndim == 1:
            op = SpdOperator.from_matrix(self.ggn.H, self.damping)
            res = cg_solve(op, R, tol=1e-10)
            if not res.converged:
                raise NumericalBreakdown(f"CG did not converge (residual {res.rel_residual:.2e})")
            return res.x
        return _block_cg(self.ggn.H, self.damping, R, tol=1e-10)

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.m:
            raise ShapeError(f"vector of length {v.shape[0]} for a posterior of size {self.m}")
        if self.kind == "zero":
            return np.zeros_like(v)
        return self.scale * self._solve(v)

    def linv(self) -> np.ndarray:
        """L^{-1} with (H + lambda I) = L L^T, so Sigma = scale * Linv^T Linv."""
        if self._L is None:
            raise ResourceLimit(f"no dense factor for m={self.m} > {self.dense_limit}")
        if self._Linv is None:
            self._Linv = scipy.linalg.solve_triangular(self._L, np.eye(self.m), lower=True)
        return self._Linv

    def quad_form(self, J: np.ndarray) -> np.ndarray:
        """J Sigma J^T for J of shape (..., K, m); returns (..., K, K)."""
        J = np.asarray(J, dtype=np.float64)
        if J.shape[-1] != self.m:
            raise ShapeError(f"Jacobian has {J.shape[-1]} columns, posterior has {self.m}")
        K = J.shape[-2]
        if self.kind == "zero":
            return np.zeros(J.shape[:-1] + (K,))
        if self._L is not None:
            Y = self.sqrt_project(J)
            out = Y @ np.swapaxes(Y, -1, -2)
        else:
            flat = J.reshape(-1, self.m)
            Z = self._solve(flat.T).T.reshape(J.shape)
            out = self.scale * (J @ np.swapaxes(Z, -1, -2))
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    def sqrt_project(self, J: np.ndarray) -> np.ndarray:
        """Y with Y Y^T = J Sigma J^T (dense factor required)."""
        if self.kind == "zero":
            return np.zeros(J.shape[:-1] + (1,))
        flat = J.reshape(-1, self.m)
        Y = (flat @ self.linv().T) * np.sqrt(self.scale)
        return Y.reshape(J.shape[:-1] + (self.m,))

    def dense(self) -> np.ndarray:
        if self.m > self.dense_limit:
            raise ResourceLimit(f"dense posterior limited to m <= {self.dense_limit}, got {self.m}")
        if self.kind == "zero":
            return np.zeros((self.m, self.m))
        Li = self.linv()
        S = self.scale * (Li.T @ Li)
        return 0.5 * (S + S.T)

    def sample(self, S: int, rng) -> np.ndarray:
        """S draws of delta theta ~ N(0, Sigma), shape (S, m)."""
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        z = rng.standard_normal((S, self.m))
        if self.kind == "zero":
            return np.zeros_like(z)
        if self._L is None:
            raise ResourceLimit("posterior sampling needs a dense factor")
        # Sigma = scale * L^{-T} L^{-1}: solve L^T x = z
        x = scipy.linalg.solve_triangular(self._L, z.T, lower=True, trans="T").T
        return np.sqrt(self.scale) * x

    def summary(self, iters: int = 200, seed: int = 0) -> dict:
        H = self.ggn.H
        lo, hi = power_extremes(H, iters, seed)
        return {
            "kind": self.kind,
            "m": int(self.m),
            "lambda": self.damping,
            "scale": self.scale,
            "trace_H": float(np.trace(H)),
            "eig_max_H": hi,
            "eig_min_H": lo,
            "solver": "cholesky" if self.is_dense else ("none" if self.kind == "zero" else "cg"),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def power_extremes(H: np.ndarray, iters: int = 200, seed: int = 0):
    """Power-iteration estimates of the smallest and largest eigenvalues."""
    m = H.shape[0]
    if m == 0 or not np.any(H):
        return 0.0, 0.0
    rng = np.random.default_rng(seed)

    def top(M):
        v = rng.standard_normal(m)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = M @ v
            nw = np.linalg.norm(w)
            if nw == 0:
                return 0.0
            lam = v @ w
            v = w / nw
        return float(lam)

    hi = top(H)
    lo = hi - top(hi * np.eye(m) - H)
    return float(max(lo, 0.0)), hi


def build_posterior(model: DenoiserModel, dataset: Dataset, sched: DiffusionSchedule,
                    kind: str, m: Optional[int] = None, indices=None, damping: float = DEFAULT_DAMPING,
                    n_pairs: int = DEFAULT_PAIRS, seed: int = 0, scale: Optional[float] = None,
                    dense_limit: int = DENSE_LIMIT,
                    index_seed: Optional[int] = None) -> PosteriorOperator:
    """Convenience constructor used by the pipeline.

    ``kind`` is "full", "last_layer" or "subnet" (uniform index set of size
    ``m`` drawn from ``seed`` unless ``indices`` is given). The default scale
    is 1/n_train so Sigma approximates the posterior of the summed loss.
    """
    from .linalg import sample_uniform_indices

    if indices is not None:
        idx = as_index_set(indices, model.p)
    elif kind == "full":
        idx = np.arange(model.p, dtype=np.int64)
    elif kind == "last_layer":
        idx = model.last_layer_indices()
    elif kind == "subnet":
        if m is None:
            raise InvalidArgument("subnet posterior needs m")
        key = [seed, 1] if index_seed is None else [seed, 1, index_seed]
        idx = sample_uniform_indices(model.p, m, np.random.default_rng(key))
    else:
        raise InvalidArgument(f"unknown posterior kind {kind!r}")
    ggn = assemble_ggn(model, dataset, sched, idx, n_pairs, np.random.default_rng([seed, 2]))
    if scale is None:
        scale = 1.0 / dataset.n
    return PosteriorOperator(ggn, damping, kind, scale, dense_limit)
