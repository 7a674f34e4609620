"""Cosine noise schedule, forward noising and the DDPM / DDIM reverse samplers.

Schedule arrays have length T+1 so that ``sched.beta[t]`` is beta_t for
t = 1..T; index 0 holds the boundary convention (bar_alpha_0 = 1).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidArgument, NumericalBreakdown, ShapeError

SAMPLERS = ("ddpm", "ddim", "mean")
COSINE_S = 0.008
BETA_MIN, BETA_MAX = 1e-8, 0.999


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    bar_alpha: np.ndarray
    a: np.ndarray
    b: np.ndarray
    tilde_beta: np.ndarray
    kind: str = "cosine"

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.kind}:{self.T}:".encode())
        h.update(np.ascontiguousarray(self.beta, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def rows(self):
        for t in range(1, self.T + 1):
            yield (t, self.beta[t], self.alpha[t], self.bar_alpha[t],
                   self.a[t], self.b[t], self.tilde_beta[t])


def schedule_from_betas(beta: np.ndarray, kind: str = "custom") -> DiffusionSchedule:
    """Derive every coefficient from beta_1..beta_T (``beta`` has length T)."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise InvalidArgument("beta must be a non-empty vector")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise InvalidArgument("every beta_t must lie in (0, 1)")
    T = beta.size
    B = np.concatenate([[0.0], beta])
    alpha = 1.0 - B
    bar = np.cumprod(alpha)
    a = np.zeros(T + 1)
    b = np.zeros(T + 1)
    tb = np.zeros(T + 1)
    a[1:] = 1.0 / np.sqrt(alpha[1:])
    b[1:] = B[1:] / (np.sqrt(alpha[1:]) * np.sqrt(1.0 - bar[1:]))
    tb[1:] = (1.0 - bar[:-1]) / (1.0 - bar[1:]) * B[1:]
    return DiffusionSchedule(T, B, alpha, bar, a, b, tb, kind)


def cosine_schedule(T: int, s: float = COSINE_S) -> DiffusionSchedule:
    if T < 2:
        raise InvalidArgument("cosine schedule needs T >= 2")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1 + s) * np.pi / 2) ** 2
    bar = f / f[0]
    beta = np.clip(1.0 - bar[1:] / bar[:-1], BETA_MIN, BETA_MAX)
    sched = schedule_from_betas(beta, kind="cosine")
    return sched


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T < 2:
        raise InvalidArgument("linear schedule needs T >= 2")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T), kind="linear")


def make_schedule(kind: str, T: int) -> DiffusionSchedule:
    if kind == "cosine":
        return cosine_schedule(T)
    if kind == "linear":
        return linear_schedule(T)
    raise InvalidArgument(f"unknown schedule kind {kind!r}")


def forward_noising(sched: DiffusionSchedule, x0, t: int, eps) -> np.ndarray:
    """x_t = sqrt(bar_alpha_t) x0 + sqrt(1 - bar_alpha_t) eps (t=0 returns x0)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    ab = sched.bar_alpha[t]
    if np.ndim(t):
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass
class NoiseRealization:
    """x_T and the per-step reverse noise, already scaled by sqrt(tilde_beta_t).

    Arrays carry a leading batch axis: ``x_T`` is (B, d) and ``eta`` is
    (T+1, B, d) with ``eta[t]`` the noise added when stepping t -> t-1.
    """

    x_T: np.ndarray
    eta: np.ndarray
    seed: int
    sample_ids: np.ndarray
    is_zero: bool = False

    @property
    def batch(self) -> int:
        return self.x_T.shape[0]

    def zeroed(self) -> "NoiseRealization":
        """Same x_T, reverse noise forced to zero."""
        return NoiseRealization(self.x_T.copy(), np.zeros_like(self.eta), self.seed,
                                self.sample_ids.copy(), True)

    def subset(self, rows) -> "NoiseRealization":
        rows = np.asarray(rows)
        return NoiseRealization(self.x_T[rows], self.eta[:, rows], self.seed,
                                self.sample_ids[rows], self.is_zero)


def make_noise(sched: DiffusionSchedule, d: int, seed: int,
               sample_ids: Sequence[int]) -> NoiseRealization:
    """Per-sample streams seeded by (seed, sample_id), so a sample's noise
    does not depend on which batch it is generated in."""
    ids = np.asarray(sample_ids, dtype=np.int64).ravel()
    T = sched.T
    x_T = np.empty((ids.size, d))
    eta = np.zeros((T + 1, ids.size, d))
    scale = np.sqrt(sched.tilde_beta)[1:, None]
    for j, sid in enumerate(ids):
        r = np.random.default_rng([int(seed), int(sid)])
        x_T[j] = r.standard_normal(d)
        eta[1:, j] = scale * r.standard_normal((T, d))
    return NoiseRealization(x_T, eta, int(seed), ids)


EpsFn = Callable[[np.ndarray, int], np.ndarray]


def _eps(model, x, t):
    out = model(x, t)
    if not np.all(np.isfinite(out)):
        raise NumericalBreakdown(f"non-finite denoiser output at t={t}")
    return out


def ddpm_step(model: EpsFn, sched: DiffusionSchedule, x, t: int, eta=None):
    """x_{t-1} = a_t x_t - b_t eps(x_t, t) + eta_t."""
    x = np.asarray(x, dtype=np.float64)
    out = sched.a[t] * x - sched.b[t] * _eps(model, x, t)
    if eta is not None:
        out = out + eta
    return out


def ddpm_mean_from_eps(sched: DiffusionSchedule, x, t: int, eps_hat):
    return sched.a[t] * x - sched.b[t] * eps_hat


def ddim_from_eps(sched: DiffusionSchedule, x, t: int, eps_hat):
    ab_t, ab_prev = sched.bar_alpha[t], sched.bar_alpha[t - 1]
    x0_hat = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_step(model: EpsFn, sched: DiffusionSchedule, x, t: int):
    """Deterministic DDIM update (no injected noise)."""
    x = np.asarray(x, dtype=np.float64)
    return ddim_from_eps(sched, x, t, _eps(model, x, t))


def reverse_update(kind: str, sched: DiffusionSchedule, x, t: int, eps_hat, eta=None):
    """One reverse step given a precomputed eps prediction."""
    if kind == "ddpm":
        out = ddpm_mean_from_eps(sched, x, t, eps_hat)
        return out if eta is None else out + eta
    if kind == "mean":
        return ddpm_mean_from_eps(sched, x, t, eps_hat)
    if kind == "ddim":
        return ddim_from_eps(sched, x, t, eps_hat)
    raise InvalidArgument(f"unknown sampler {kind!r}; choose from {SAMPLERS}")


def sample_trajectory(model: EpsFn, sched: DiffusionSchedule, kind: str,
                      noise: NoiseRealization, keep: bool = True):
    """Run the reverse chain from ``noise.x_T``.

    Returns ``states`` of shape (T+1, B, d) with ``states[t] = x_t`` when
    ``keep`` is true, otherwise just x_0 of shape (B, d).
    """
    if kind not in SAMPLERS:
        raise InvalidArgument(f"unknown sampler {kind!r}; choose from {SAMPLERS}")
    if noise.eta.shape[0] != sched.T + 1:
        raise ShapeError("noise realization was built for a different T")
    x = noise.x_T.copy()
    states = np.empty((sched.T + 1,) + x.shape) if keep else None
    if keep:
        states[sched.T] = x
    for t in range(sched.T, 0, -1):
        eps_hat = _eps(model, x, t)
        x = reverse_update(kind, sched, x, t, eps_hat, noise.eta[t] if kind == "ddpm" else None)
        if keep:
            states[t - 1] = x
    return states if keep else x


def write_schedule_csv(sched: DiffusionSchedule, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,beta,alpha,bar_alpha,a,b,tilde_beta\n")
        for row in sched.rows():
            fh.write(str(row[0]) + "," + ",".join(repr(float(v)) for v in row[1:]) + "\n")


def oracle_eps(sched: DiffusionSchedule, x0) -> EpsFn:
    """Perfect denoiser for a single known x0, used in consistency checks."""
    x0 = np.asarray(x0, dtype=np.float64)

    def fn(x, t):
        ab = sched.bar_alpha[t]
        return (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    return fn
