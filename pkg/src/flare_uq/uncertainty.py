"""Epistemic covariance propagation through the reverse chain.

The recursion, for t = T..1 starting from Sigma_T = 0, is

    Sigma_{t-1} = a_t^2 Sigma_t + b_t^2 J_t Sigma_theta J_t^T

with J_t the parameter Jacobian (restricted to the posterior's index set)
evaluated at the realised state x_t.  The same DDPM coefficients (a_t, b_t)
are used whatever sampler moves the state, so a DDIM run and a noise-free
DDPM run along identical states give identical covariances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .denoiser import DenoiserModel
from .diffusion import (
    SAMPLERS,
    DiffusionSchedule,
    NoiseRealization,
    make_noise,
    reverse_update,
)
from .errors import InvalidArgument, ShapeError
from .laplace import PosteriorOperator, build_posterior

ESTIMATORS = ("flare", "llla", "full", "bayesdiff")


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def one_step_projection(J: np.ndarray, posterior, b_t: float) -> np.ndarray:
    """b_t^2 J Sigma J^T. ``posterior`` is a PosteriorOperator or a dense matrix."""
    J = np.asarray(J, dtype=np.float64)
    if isinstance(posterior, PosteriorOperator):
        return b_t ** 2 * posterior.quad_form(J)
    S = np.asarray(posterior, dtype=np.float64)
    if J.shape[-1] != S.shape[0]:
        raise ShapeError(f"J has {J.shape[-1]} columns, Sigma is {S.shape}")
    return _sym(b_t ** 2 * (J @ S @ np.swapaxes(J, -1, -2)))


def propagate(sigma_prev: np.ndarray, a_t: float, delta: np.ndarray) -> np.ndarray:
    """a_t^2 Sigma + Delta, symmetrised."""
    return _sym(a_t ** 2 * np.asarray(sigma_prev) + np.asarray(delta))


def unrolled_accumulation(a: Sequence[float], b: Sequence[float], jacobians: Sequence[np.ndarray],
                          sigma_theta: np.ndarray) -> np.ndarray:
    """Closed form sum_s (prod_{j<s} a_j)^2 b_s^2 J_s Sigma J_s^T.

    ``a``, ``b`` and ``jacobians`` are indexed so that entry s-1 is step s.
    """
    S = np.asarray(sigma_theta, dtype=np.float64)
    d = jacobians[0].shape[0]
    out = np.zeros((d, d))
    w = 1.0
    for s in range(len(jacobians)):
        J = jacobians[s]
        out += (w * b[s]) ** 2 * (J @ S @ J.T)
        w *= a[s]
    return _sym(out)


def discount(sched: DiffusionSchedule) -> np.ndarray:
    """w[t] = (prod_{j<t} a_j)^2 = 1 / bar_alpha_{t-1}, the weight of step t in Sigma_0."""
    w = np.zeros(sched.T + 1)
    w[1:] = 1.0 / sched.bar_alpha[:-1]
    return w


@dataclass
class EpistemicTrajectory:
    """Result of one batched epistemic run.

    ``trace_contrib[t, i]`` is the discounted contribution of step t to
    trace(Sigma_0) for sample i, so its column sums equal ``trace0``.
    ``step_trace[t, i]`` is the undiscounted b_t^2 trace(J Sigma J^T).
    """

    x0: np.ndarray
    sigma0: np.ndarray
    trace_contrib: np.ndarray
    step_trace: np.ndarray
    aleatoric: np.ndarray
    estimator: str
    sampler: str
    sample_ids: np.ndarray
    states: Optional[np.ndarray] = None
    sigma_stride: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def trace0(self) -> np.ndarray:
        return np.trace(self.sigma0, axis1=1, axis2=2)

    @property
    def scores(self) -> np.ndarray:
        return self.trace0 / self.sigma0.shape[-1]


def _aleatoric_step(sched, t, sampler, noise, ale):
    ale = sched.a[t] ** 2 * ale
    if sampler == "ddpm" and not getattr(noise, "is_zero", False):
        ale = ale + sched.tilde_beta[t]
    return ale


def epistemic_rollout(model: DenoiserModel, sched: DiffusionSchedule, posterior: PosteriorOperator,
                      sampler: str, noise: NoiseRealization, estimator: str = "flare",
                      stride: int = 0, keep_states: bool = False,
                      replay_states: Optional[np.ndarray] = None,
                      b_scale: float = 1.0, chunk: int = 256) -> EpistemicTrajectory:
    """Run the reverse chain and the covariance recursion side by side.

    With ``replay_states`` (shape (T+1, B, d)) the Jacobians are evaluated
    along the supplied states instead of the chain's own path.
    ``aleatoric`` holds the per-dimension aleatoric variance accumulated by
    injected noise (zero for DDIM, the mean path and zeroed noise).
    """
    if sampler not in SAMPLERS:
        raise InvalidArgument(f"unknown sampler {sampler!r}")
    B, d = noise.x_T.shape
    if d != model.d:
        raise ShapeError("noise dimension does not match the model")
    parts = []
    for s in range(0, B, chunk):
        rows = np.arange(s, min(B, s + chunk))
        sub_states = None if replay_states is None else replay_states[:, rows]
        parts.append(_rollout_chunk(model, sched, posterior, sampler, noise.subset(rows),
                                    stride, keep_states, sub_states, b_scale))
    cat = lambda k, ax=0: np.concatenate([p[k] for p in parts], axis=ax)
    stride_d = {}
    if stride:
        for t in parts[0]["stride"]:
            stride_d[t] = np.concatenate([p["stride"][t] for p in parts], axis=0)
    return EpistemicTrajectory(
        x0=cat("x0"), sigma0=cat("sigma"), trace_contrib=cat("contrib", 1),
        step_trace=cat("step", 1), aleatoric=cat("ale"), estimator=estimator,
        sampler=sampler, sample_ids=noise.sample_ids.copy(),
        states=cat("states", 1) if keep_states else None, sigma_stride=stride_d)


def _rollout_chunk(model, sched, posterior, sampler, noise, stride, keep_states,
                   replay, b_scale):
    T = sched.T
    x = noise.x_T.copy()
    B, d = x.shape
    sigma = np.zeros((B, d, d))
    contrib = np.zeros((T + 1, B))
    step = np.zeros((T + 1, B))
    ale = np.zeros(B)
    w = discount(sched)
    states = np.empty((T + 1, B, d)) if keep_states else None
    stride_out = {}
    plan = None if posterior.kind == "zero" else model.plan(posterior.indices)
    for t in range(T, 0, -1):
        xt = x if replay is None else replay[t]
        if keep_states:
            states[t] = xt
        bt = b_scale * sched.b[t]
        if plan is None:
            eps_hat = model.forward(xt, t)
            delta = np.zeros((B, d, d))
        else:
            J, eps_hat = _jac_and_out(model, xt, t, plan)
            delta = bt ** 2 * posterior.quad_form(J)
        sigma = propagate(sigma, sched.a[t], delta)
        tr = np.trace(delta, axis1=1, axis2=2)
        step[t] = tr
        contrib[t] = w[t] * tr
        ale = _aleatoric_step(sched, t, sampler, noise, ale)
        eta = noise.eta[t] if sampler == "ddpm" else None
        x = reverse_update(sampler, sched, xt, t, eps_hat, eta)
        if stride and (t - 1) % stride == 0:
            stride_out[t - 1] = sigma.copy()
    if keep_states:
        states[0] = x
    return {"x0": x, "sigma": sigma, "contrib": contrib, "step": step,
            "ale": ale, "states": states, "stride": stride_out}


def _jac_and_out(model, x, t, plan):
    return model.jacobian_batch(x, t, plan, return_output=True)


def flare_sample(model, sched, posterior, sampler, noise, **kw) -> EpistemicTrajectory:
    """FLARE: the recursion over the posterior's (random) index set."""
    return epistemic_rollout(model, sched, posterior, sampler, noise, estimator="flare", **kw)


def llla_rollout(model, sched, posterior, noise, sampler: str = "ddpm", **kw) -> EpistemicTrajectory:
    """Same machinery restricted to the deterministic last-layer index set."""
    ll = model.last_layer_indices()
    if posterior.kind != "zero" and not np.array_equal(posterior.indices, ll):
        raise InvalidArgument("last-layer rollout needs a posterior built on the head indices")
    return epistemic_rollout(model, sched, posterior, sampler, noise, estimator="llla", **kw)


def streaming_trace(model: DenoiserModel, sched: DiffusionSchedule, posterior: PosteriorOperator,
                    noise: NoiseRealization, sampler: str = "ddpm", tol: float = 1e-10):
    """trace(Sigma_0) without forming d x d matrices.

    Per step and output k, u_{t,k} = g^T z with (H + lambda I) z = g solved
    by CG, g the k-th Jacobian row. Returns (x0, traces (B,), per-step
    discounted contributions (T+1, B)).
    """
    from .linalg import SpdOperator, cg_solve
    from .errors import NumericalBreakdown

    H = posterior.ggn.H
    op = SpdOperator.from_matrix(H, posterior.damping)
    plan = model.plan(posterior.indices)
    x = noise.x_T.copy()
    B = x.shape[0]
    w = discount(sched)
    contrib = np.zeros((sched.T + 1, B))
    for t in range(sched.T, 0, -1):
        J, eps_hat = _jac_and_out(model, x, t, plan)
        for i in range(B):
            u = 0.0
            for g in J[i]:
                if not np.any(g):
                    continue
                res = cg_solve(op, g, tol=tol)
                if not res.converged:
                    raise NumericalBreakdown(f"CG failed at t={t}: residual {res.rel_residual:.2e}")
                u += g @ res.x
            contrib[t, i] = w[t] * sched.b[t] ** 2 * posterior.scale * u
        x = reverse_update(sampler, sched, x, t, eps_hat,
                           noise.eta[t] if sampler == "ddpm" else None)
    return x, contrib.sum(axis=0), contrib


@dataclass
class PredictiveVarianceResult:
    x0: np.ndarray
    var: np.ndarray  # (T+1, B, d) total variance per step; var[0] is the final one
    sample_ids: np.ndarray

    @property
    def scores(self) -> np.ndarray:
        return self.var[0].mean(axis=1)


def predictive_variance_rollout(model: DenoiserModel, sched: DiffusionSchedule,
                                posterior: PosteriorOperator, S: int, noise: NoiseRealization,
                                rng, chunk: int = 128) -> PredictiveVarianceResult:
    """BayesDiff-style diagonal variance recursion with Monte-Carlo head draws.

    S particles, each with its own last-layer draw, follow the DDPM update
    with the shared noise; per step the dimensionwise spread of their
    eps predictions and their covariance with the state feed

        Var_{t-1} = a^2 Var_t + b^2 Var(eps) - 2 a b Cov(x, eps) + tilde_beta.

    The returned x0 is the path of the point estimate itself.
    """
    if S < 2:
        raise InvalidArgument("predictive variance needs S >= 2 draws")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    ll = model.last_layer_indices()
    if posterior.kind != "zero" and not np.array_equal(posterior.indices, ll):
        raise InvalidArgument("predictive-variance baseline needs a last-layer posterior")
    head = model.layer("head")
    draws = posterior.sample(S, rng)  # (S, m) ordered as the head block
    dW = draws[:, :head.out * head.inp].reshape(S, head.out, head.inp)
    db = draws[:, head.out * head.inp:]
    B = noise.batch
    outs = []
    for s in range(0, B, chunk):
        rows = np.arange(s, min(B, s + chunk))
        outs.append(_pv_chunk(model, sched, noise.subset(rows), dW, db))
    x0 = np.concatenate([o[0] for o in outs], axis=0)
    var = np.concatenate([o[1] for o in outs], axis=1)
    return PredictiveVarianceResult(x0, var, noise.sample_ids.copy())


def _pv_chunk(model, sched, noise, dW, db):
    T = sched.T
    S = dW.shape[0]
    B, d = noise.x_T.shape
    Wo, bo = model._wb(model.layer("head"), model.params.values)
    x_map = noise.x_T.copy()
    parts = np.broadcast_to(noise.x_T, (S, B, d)).copy()
    var = np.zeros((T + 1, B, d))
    v = np.zeros((B, d))
    for t in range(T, 0, -1):
        a, b = sched.a[t], sched.b[t]
        eps_map = model.forward(x_map, t)
        h = model.features(parts.reshape(S * B, d), t).reshape(S, B, -1)
        eps = np.einsum("sbh,sdh->sbd", h, Wo[None] + dW) + (bo + db)[:, None, :]
        ve = eps.var(axis=0, ddof=1)
        xc = parts - parts.mean(axis=0)
        ec = eps - eps.mean(axis=0)
        cov = np.einsum("sbd,sbd->bd", xc, ec) / (S - 1)
        v = a * a * v + b * b * ve - 2 * a * b * cov + sched.tilde_beta[t]
        var[t - 1] = v
        eta = None if getattr(noise, "is_zero", False) else noise.eta[t]
        x_map = reverse_update("ddpm", sched, x_map, t, eps_map, eta)
        parts = reverse_update("ddpm", sched, parts, t, eps, eta)
    return x_map, var


def keep_fraction_sweep(model: DenoiserModel, sched: DiffusionSchedule, dataset,
                        fractions: Sequence[float], n_samples: int, seed: int = 0,
                        sampler: str = "ddpm", damping: float = 1e-6, n_pairs: int = 512,
                        dense_limit: int = 1 << 14):
    """Mean trace(Sigma_0)/d per kept fraction, with shared noise across fractions.

    The index set for each fraction is drawn from a sub-seed derived from
    (seed, fraction), so repeated fractions give identical rows.
    """
    import math

    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise InvalidArgument(f"fraction {f} outside (0, 1]")
    noise = make_noise(sched, model.d, seed, np.arange(n_samples))
    rows = []
    for f in fractions:
        m = max(1, math.ceil(f * model.p))
        sub = int(round(f * 1_000_000))
        post = build_posterior(model, dataset, sched, "subnet" if m < model.p else "full",
                               m=m, damping=damping, n_pairs=n_pairs, seed=seed,
                               dense_limit=dense_limit, index_seed=sub)
        traj = epistemic_rollout(model, sched, post, sampler, noise, estimator="flare")
        rows.append({"fraction": float(f), "m": int(m), "mean_trace": float(traj.scores.mean()),
                     "noise_seed": int(seed)})
    return rows
