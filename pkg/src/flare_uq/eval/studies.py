"""Numerical validation studies: recursion vs closed form, the least-squares
identity, subnetwork sketch convergence, the delta-method covariance check
and the Monte-Carlo cross-covariance study."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import stats

from ..denoiser import DenoiserModel
from ..diffusion import DiffusionSchedule, make_noise, reverse_update, schedule_from_betas
from ..errors import InvalidArgument, NotPositiveDefinite, NumericalBreakdown
from ..laplace import PosteriorOperator
from ..linalg import (
    coherence,
    condition_number,
    pinv_quadratic_form,
    sample_uniform_indices,
)
from ..uncertainty import one_step_projection, propagate, unrolled_accumulation


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


# -- recursion vs unrolled sum -------------------------------------------

def random_spd(m: int, rng, cond: float = 100.0) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    ev = np.geomspace(1.0, 1.0 / cond, m)
    S = (Q * ev) @ Q.T
    return 0.5 * (S + S.T)


def unroll_check(n_instances: int = 100, rng=0, d_max: int = 4, p_max: int = 32,
                 T_max: int = 8) -> dict:
    """Max relative trace deviation between the step-by-step recursion and
    the closed-form sum, over random schedules, Jacobians and posteriors."""
    rng = _rng(rng)
    worst = 0.0
    for _ in range(n_instances):
        d = int(rng.integers(1, d_max + 1))
        p = int(rng.integers(1, p_max + 1))
        T = int(rng.integers(1, T_max + 1))
        sched = schedule_from_betas(rng.uniform(0.01, 0.5, T))
        Js = [rng.standard_normal((d, p)) for _ in range(T)]
        S = random_spd(p, rng)
        sigma = np.zeros((d, d))
        for t in range(T, 0, -1):
            sigma = propagate(sigma, sched.a[t], one_step_projection(Js[t - 1], S, sched.b[t]))
        closed = unrolled_accumulation(sched.a[1:], sched.b[1:], Js, S)
        dev = abs(np.trace(sigma) - np.trace(closed)) / abs(np.trace(closed))
        worst = max(worst, dev)
    return {"instances": n_instances, "max_rel_trace_dev": worst}


# -- least-squares identity ------------------------------------------------

def svd_pinv_form(A: np.ndarray, B: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """B^T (A A^T)^+ B from the SVD of A A^T (the direct route)."""
    U, s, _ = np.linalg.svd(A @ A.T)
    keep = s > rtol * s[0]
    Ub = U[:, keep].T @ B
    return Ub.T @ (Ub / s[keep][:, None])


def lemma1_check(trials: int = 100, rng=0, p_max: int = 40) -> dict:
    rng = _rng(rng)
    worst = 0.0
    for _ in range(trials):
        p = int(rng.integers(3, p_max + 1))
        k = int(rng.integers(1, p))
        l = int(rng.integers(1, p))
        A = rng.standard_normal((p, k))
        B = rng.standard_normal((p, l))
        direct = svd_pinv_form(A, B)
        ls = pinv_quadratic_form(A, B)
        dev = np.linalg.norm(direct - ls) / max(np.linalg.norm(direct), 1e-300)
        worst = max(worst, dev)
    return {"trials": trials, "max_rel_frobenius_dev": float(worst)}


# -- subnetwork sketch convergence ----------------------------------------

@dataclass
class SketchStudyReport:
    m_grid: List[int]
    mean_rel_error: List[float]
    std_rel_error: List[float]
    slope: float
    error_at_p: float
    coherence: float
    kappa: float
    gamma: float
    rank: int
    trials: int
    flagged_low_alignment: bool
    raw: List[List[float]] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _range_basis(A: np.ndarray, rtol: float):
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    r = int(np.sum(s > rtol * s[0]))
    return U[:, :r], s[:r]


def sketch_convergence_study(J_pop: np.ndarray, J_t: np.ndarray, m_grid: Sequence[int],
                             trials: int = 50, rng=0, rtol: float = 1e-10) -> SketchStudyReport:
    """Relative error of the column-subsampled quadratic form against the exact one.

    V = trace(J_t (J_pop^T J_pop)^+ J_t^T) is computed through the
    least-squares route with A = J_pop^T (p x nd) and B = J_t^T (p x d);
    the estimate restricts both to a uniform random row set I of A.
    Coherence and condition number are measured on the numerical range of
    A (rank r), which is where the pseudo-inverse acts.
    """
    rng = _rng(rng)
    A = np.asarray(J_pop, dtype=np.float64).T
    B = np.asarray(J_t, dtype=np.float64).T
    p = A.shape[0]
    m_grid = [int(m) for m in m_grid]
    if any(m < 1 or m > p for m in m_grid) or m_grid != sorted(m_grid):
        raise InvalidArgument("m_grid must be ascending within [1, p]")
    V = np.trace(pinv_quadratic_form(A, B, strict=False, rcond=rtol))
    U, s = _range_basis(A, rtol)
    r = U.shape[1]
    mu = coherence(U * s)
    kappa = condition_number(U * s)
    P = U @ U.T
    inside = np.linalg.norm(P @ B) ** 2
    outside = np.linalg.norm(B - P @ B) ** 2
    gamma = float(inside / outside) if outside > 0 else float("inf")
    means, stds, raw = [], [], []
    for m in m_grid:
        errs = []
        for _ in range(trials):
            I = sample_uniform_indices(p, m, rng)
            Vt = np.trace(pinv_quadratic_form(A[I], B[I], strict=False, rcond=rtol))
            errs.append(abs(V - Vt) / V)
        raw.append(errs)
        means.append(float(np.mean(errs)))
        stds.append(float(np.std(errs)))
    full = np.trace(pinv_quadratic_form(A, B, strict=False, rcond=rtol))
    fit_m = [m for m, e in zip(m_grid, means) if m < p and e > 0]
    fit_e = [e for m, e in zip(m_grid, means) if m < p and e > 0]
    slope = float(np.polyfit(np.log(fit_m), np.log(fit_e), 1)[0]) if len(fit_m) >= 2 else float("nan")
    return SketchStudyReport(m_grid, means, stds, slope, float(abs(V - full) / V), float(mu),
                             float(kappa), gamma, r, trials, bool(gamma < 1e-3), raw)


def low_rank_instance(p: int = 512, nd: int = 128, d: int = 4, rank: int = 8,
                      noise: float = 0.05, rng=0, spike: Optional[float] = None):
    """Synthetic (J_pop, J_t) pair with an incoherent rank-``rank`` row space.

    J_t mixes rows of J_pop and adds a ``noise``-relative component
    orthogonal to that row space. ``spike`` inflates one parameter
    coordinate to build a coherent counterpart.
    """
    rng = _rng(rng)
    G = rng.standard_normal((nd, rank))
    F = rng.standard_normal((rank, p))
    if spike is not None:
        F[:, 0] *= spike
    J_pop = G @ F / np.sqrt(rank)
    C = rng.standard_normal((d, nd)) / np.sqrt(nd)
    J_t = C @ J_pop
    Q, _ = np.linalg.qr(J_pop.T)
    E = rng.standard_normal((d, p))
    E -= (E @ Q) @ Q.T
    E *= noise * np.linalg.norm(J_t) / np.linalg.norm(E)
    return J_pop, J_t + E


# -- delta-method covariance check ----------------------------------------

def prop1_mc_check(model: DenoiserModel, sigma: np.ndarray, sched: DiffusionSchedule,
                   x_t: np.ndarray, t: int, S: int = 4096, rng=0, scale: float = 1.0,
                   indices=None, chunk: int = 512) -> dict:
    """Compare the MC covariance of a_t x - b_t eps_theta(x, t) over
    theta ~ N(theta_hat, scale * Sigma) with b_t^2 J Sigma J^T.

    ``sigma`` is the dense covariance over ``indices`` (all parameters by
    default); other coordinates stay at theta_hat.
    """
    rng = _rng(rng)
    idx = np.arange(model.p) if indices is None else np.asarray(indices)
    Sg = scale * np.asarray(sigma, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    J = model.param_jacobian_columns(x_t, t, idx)
    analytic = one_step_projection(J, Sg, sched.b[t])
    tr_an = float(np.trace(analytic))
    if tr_an == 0.0:
        return {"rel_trace_error": 0.0, "trace_analytic": 0.0, "trace_mc": 0.0, "S": S}
    try:
        L = np.linalg.cholesky(Sg + 1e-300 * np.eye(len(idx)))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    means = np.empty((S, model.d))
    base = model.params.values
    for s0 in range(0, S, chunk):
        k = min(chunk, S - s0)
        vals = np.broadcast_to(base, (k, model.p)).copy()
        vals[:, idx] += rng.standard_normal((k, len(idx))) @ L.T
        eps = model.forward(np.broadcast_to(x_t, (k, model.d)), t, vals)
        means[s0:s0 + k] = sched.a[t] * x_t - sched.b[t] * eps
    mc = np.cov(means, rowvar=False, ddof=1).reshape(model.d, model.d)
    tr_mc = float(np.trace(mc))
    return {"rel_trace_error": abs(tr_mc - tr_an) / tr_an, "trace_analytic": tr_an,
            "trace_mc": tr_mc, "S": S}


# -- cross-covariance study ------------------------------------------------

@dataclass
class CrossTermReport:
    pct_change: List[float]
    mean: float
    std: float
    max: float
    se: float
    df: int
    mean_abs: float
    se_abs: float
    tests: List[dict]
    n_paths: int
    S: int

    def to_dict(self):
        return asdict(self)


def cross_term_path(model: DenoiserModel, sched: DiffusionSchedule, sigma_L: np.ndarray,
                    sigma_dense: np.ndarray, noise, S: int, rng) -> float:
    """Percent change of u = sum_j Var_j from adding the MC cross term on one path."""
    p, d = model.p, model.d
    base = model.params.values
    dtheta = rng.standard_normal((S, p)) @ sigma_L.T
    thetas = base[None, :] + dtheta
    x_map = noise.x_T[0].copy()
    xs = np.broadcast_to(x_map, (S, d)).copy()
    v_no = np.zeros(d)
    v_x = np.zeros(d)
    for t in range(sched.T, 0, -1):
        a, b = sched.a[t], sched.b[t]
        if not np.all(np.isfinite(xs)) or np.abs(xs).max() > 1e100:
            raise NumericalBreakdown(
                f"posterior-draw trajectories diverged at t={t}; shrink the posterior scale")
        J, eps_map = model.jacobian_batch(x_map[None], t, return_output=True)
        J, eps_map = J[0], eps_map[0]
        lin = dtheta @ J.T
        diag = np.sum((J @ sigma_dense) * J, axis=1)
        xc = xs - xs.mean(axis=0)
        lc = lin - lin.mean(axis=0)
        cov = np.einsum("sd,sd->d", xc, lc) / (S - 1)
        v_no = a * a * v_no + b * b * diag
        v_x = a * a * v_x + b * b * diag - 2 * a * b * cov
        with np.errstate(over="ignore", invalid="ignore"):
            eps_s = model.forward(xs, t, thetas)
        x_map = reverse_update("ddpm", sched, x_map, t, eps_map, noise.eta[t, 0])
        xs = reverse_update("ddpm", sched, xs, t, eps_s, noise.eta[t, 0])
    u_no, u_x = v_no.sum(), v_x.sum()
    return float(100.0 * (u_x - u_no) / u_no)


def cross_term_study(model: DenoiserModel, posterior: PosteriorOperator, sched: DiffusionSchedule,
                     n_paths: int = 20, S: int = 128, thresholds=(0.005, 0.01), seed: int = 0,
                     zero_draws: bool = False) -> CrossTermReport:
    """Monte-Carlo size of the dropped cross-covariance term.

    ``posterior`` must cover all parameters. ``zero_draws`` forces every
    draw to theta_hat (zero-covariance double).
    """
    if S < 8:
        raise InvalidArgument("cross-term study needs S >= 8")
    if posterior.m != model.p:
        raise InvalidArgument("cross-term study needs a full-parameter posterior")
    sigma = posterior.dense()
    if zero_draws:
        L = np.zeros_like(sigma)
    else:
        try:
            L = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
    noise = make_noise(sched, model.d, seed, np.arange(n_paths))
    pct = []
    for i in range(n_paths):
        rng = np.random.default_rng([seed, 7, i])
        pct.append(cross_term_path(model, sched, L, sigma, noise.subset([i]), S, rng))
    pct = np.asarray(pct)
    ab = np.abs(pct)
    n = pct.size
    se = float(pct.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    se_abs = float(ab.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    tests = []
    for tau in thresholds:
        # H0: E|du/u| >= tau against H1: E|du/u| < tau
        if n > 1 and se_abs > 0:
            res = stats.ttest_1samp(ab, tau, alternative="less")
            tstat, pval = float(res.statistic), float(res.pvalue)
        else:
            tstat = float("-inf") if ab.mean() < tau else float("inf")
            pval = 0.0 if ab.mean() < tau else 1.0
        tests.append({"tau": float(tau), "t": tstat, "p": pval})
    return CrossTermReport(pct.tolist(), float(pct.mean()), float(pct.std(ddof=1)) if n > 1 else 0.0,
                           float(ab.max()), se, n - 1, float(ab.mean()), se_abs, tests, n, S)
