"""AdamW with cosine learning-rate decay, global-norm clipping and EMA."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .datasets import Dataset
from .denoiser import DenoiserModel, snr_weights
from .diffusion import DiffusionSchedule
from .errors import InvalidArgument, ShapeError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    batch: int = 512
    steps: int = 20000
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    seed: int = 0
    adam_eps: float = 1e-8
    snr_weighting: bool = False

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        b1, b2 = self.adam_betas
        if self.lr <= 0:
            raise InvalidArgument("lr must be positive")
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise InvalidArgument("Adam betas must lie in [0, 1)")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise InvalidArgument("ema_decay must lie in [0, 1]")
        if self.batch < 1 or self.steps < 0:
            raise InvalidArgument("batch must be >= 1 and steps >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, p: int) -> "AdamState":
        return cls(np.zeros(p), np.zeros(p))


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine decay from ``base`` at step 0 to 0 at ``total``."""
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + np.cos(np.pi * min(step, total) / total))


def clip_by_global_norm(grad: np.ndarray, max_norm: Optional[float]) -> np.ndarray:
    if max_norm is None or max_norm <= 0:
        return grad
    norm = np.linalg.norm(grad)
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def adamw_step(params: np.ndarray, grad: np.ndarray, state: AdamState,
               cfg: TrainConfig, step_index: int) -> bool:
    """In-place AdamW update of ``params``. Returns False if the step was
    skipped because the gradient was not finite."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ShapeError("params, grad and optimizer state must share a shape")
    if not np.all(np.isfinite(grad)):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", step_index)
        return False
    g = clip_by_global_norm(grad, cfg.grad_clip)
    b1, b2 = cfg.adam_betas
    state.step += 1
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * g * g
    mhat = state.m / (1 - b1 ** state.step)
    vhat = state.v / (1 - b2 ** state.step)
    lr = cosine_lr(cfg.lr, step_index, cfg.steps)
    # decoupled decay
    params *= 1.0 - lr * cfg.weight_decay
    params -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return True


def ema_update(shadow: np.ndarray, params: np.ndarray, decay: float) -> np.ndarray:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    if shadow.shape != params.shape:
        raise ShapeError("EMA shadow and params differ in shape")
    shadow *= decay
    shadow += (1.0 - decay) * params
    return shadow


@dataclass
class TrainResult:
    model: DenoiserModel
    ema: DenoiserModel
    losses: List[float] = field(default_factory=list)
    skipped: int = 0

    @property
    def theta_hat(self) -> DenoiserModel:
        return self.ema


def draw_batch(x0: np.ndarray, sched: DiffusionSchedule, batch: int, rng: np.random.Generator):
    """Uniform timesteps in 1..T and the matching noised inputs."""
    rows = rng.integers(0, x0.shape[0], size=batch)
    t = rng.integers(1, sched.T + 1, size=batch)
    eps = rng.standard_normal((batch, x0.shape[1]))
    ab = sched.bar_alpha[t][:, None]
    x_t = np.sqrt(ab) * x0[rows] + np.sqrt(1.0 - ab) * eps
    return x_t, t, eps


def train(model: DenoiserModel, dataset: Dataset, sched: DiffusionSchedule,
          cfg: TrainConfig, log_every: int = 0) -> TrainResult:
    """Train in place from ``model``'s current parameters.

    The returned ``ema`` model is the point estimate used downstream.
    """
    if dataset.dim != model.d:
        raise ShapeError(f"dataset dim {dataset.dim} != model dim {model.d}")
    if model.arch.T != sched.T:
        raise ShapeError("model and schedule disagree on T")
    rng = np.random.default_rng(cfg.seed)
    raw = model.with_values(model.params.values)
    ema = model.with_values(model.params.values)
    state = AdamState.zeros(model.p)
    w_table = snr_weights(sched.bar_alpha) if cfg.snr_weighting else None
    losses = []
    x0 = dataset.samples
    for step in range(cfg.steps):
        x_t, t, eps = draw_batch(x0, sched, cfg.batch, rng)
        w = None if w_table is None else w_table[t]
        loss, grad = raw.loss_and_grad(x_t, t, eps, w)
        adamw_step(raw.params.values, grad, state, cfg, step)
        ema_update(ema.params.values, raw.params.values, cfg.ema_decay)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.5f", step + 1, np.mean(losses[-log_every:]))
    return TrainResult(raw, ema, losses, state.skipped)


def eval_loss(model: DenoiserModel, dataset: Dataset, sched: DiffusionSchedule,
              n: int = 4096, seed: int = 12345) -> float:
    """Monte-Carlo epsilon-MSE with uniform timesteps (fixed draw)."""
    rng = np.random.default_rng(seed)
    x_t, t, eps = draw_batch(dataset.samples, sched, n, rng)
    r = model.forward(x_t, t) - eps
    return float(np.mean(r * r))
