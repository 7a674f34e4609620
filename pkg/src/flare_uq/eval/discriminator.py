"""Real-vs-generated MLP classifier (two SiLU hidden layers, logistic output)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..denoiser import dsilu, silu
from ..errors import InvalidArgument, ShapeError
from ..training import AdamState, TrainConfig, adamw_step


@dataclass
class Discriminator:
    weights: list  # [(W, b), ...] for the two hidden layers and the output
    mean: np.ndarray
    std: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = (np.asarray(x, dtype=np.float64) - self.mean) / self.std
        for W, b in self.weights[:-1]:
            h = silu(h @ W.T + b)
        W, b = self.weights[-1]
        return (h @ W.T + b)[:, 0]

    def score(self, x: np.ndarray) -> np.ndarray:
        """Probability that x comes from the real data."""
        return expit(self.logits(x))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.weights])


def _unpack(theta, shapes):
    out, off = [], 0
    for o, i in shapes:
        W = theta[off:off + o * i].reshape(o, i)
        off += o * i
        b = theta[off:off + o]
        off += o
        out.append((W, b))
    return out


def _loss_grad(theta, shapes, x, y, w):
    layers = _unpack(theta, shapes)
    acts, pre = [x], []
    h = x
    for W, b in layers[:-1]:
        z = h @ W.T + b
        pre.append(z)
        h = silu(z)
        acts.append(h)
    W, b = layers[-1]
    logit = (h @ W.T + b)[:, 0]
    # weighted binary cross-entropy on logits
    loss = np.sum(w * (np.logaddexp(0.0, logit) - y * logit)) / w.sum()
    g = (w * (expit(logit) - y) / w.sum())[:, None]
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        grads.append((g.T @ acts[k], g.sum(axis=0)))
        if k:
            g = (g @ W) * dsilu(pre[k - 1])
    grads.reverse()
    return loss, np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


def train_discriminator(real: np.ndarray, generated: np.ndarray, rng=0, width: int = 64,
                        steps: int = 10000, batch: int = 256, lr: float = 1e-3) -> Discriminator:
    """Fit on the given sets with class-balanced weights (real = label 1)."""
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(generated, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ShapeError(f"real {real.shape} and generated {gen.shape} must share a dimension")
    if real.shape[0] == 0 or gen.shape[0] == 0:
        raise InvalidArgument("both sets must be non-empty")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.concatenate([real, gen])
    y = np.concatenate([np.ones(len(real)), np.zeros(len(gen))])
    w = np.concatenate([np.full(len(real), 0.5 / len(real)), np.full(len(gen), 0.5 / len(gen))])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    xs = (x - mean) / std
    d = x.shape[1]
    shapes = [(width, d), (width, width), (1, width)]
    theta = []
    for o, i in shapes:
        bound = 1.0 / np.sqrt(i)
        theta.append(rng.uniform(-bound, bound, o * i + o))
    theta = np.concatenate(theta)
    cfg = TrainConfig(lr=lr, batch=batch, steps=steps, grad_clip=1.0, weight_decay=1e-4)
    state = AdamState.zeros(theta.size)
    # sample rows proportionally to the class-balancing weights
    prob = w / w.sum()
    for step in range(steps):
        rows = rng.choice(len(xs), size=batch, p=prob)
        _, g = _loss_grad(theta, shapes, xs[rows], y[rows], np.ones(batch))
        adamw_step(theta, g, state, cfg, step)
    return Discriminator(_unpack(theta, shapes), mean, std)


@dataclass
class Split:
    real_train: np.ndarray
    real_eval: np.ndarray
    gen_train: np.ndarray
    gen_eval: np.ndarray  # row positions into the generated set


def split_70_30(n_real: int, n_gen: int, rng) -> Split:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pr = rng.permutation(n_real)
    pg = rng.permutation(n_gen)
    kr = int(round(0.7 * n_real))
    kg = int(round(0.7 * n_gen))
    return Split(np.sort(pr[:kr]), np.sort(pr[kr:]), np.sort(pg[:kg]), np.sort(pg[kg:]))


def held_out_accuracy(real: np.ndarray, generated: np.ndarray, rng=0, **kw):
    """Train on a 70% split and return (balanced held-out accuracy, discriminator, split)."""
    from .metrics import balanced_accuracy

    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    sp = split_70_30(len(real), len(generated), rng)
    disc = train_discriminator(real[sp.real_train], generated[sp.gen_train], rng, **kw)
    acc = balanced_accuracy(disc.score(real[sp.real_eval]), disc.score(generated[sp.gen_eval]))
    return acc, disc, sp
