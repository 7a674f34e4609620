"""Finite-difference oracles shared by the tests."""

import numpy as np


def fd4(f, theta, j, h=1e-3):
    """Fourth-order central difference of f along coordinate j."""
    def at(s):
        v = theta.copy()
        v[j] += s
        return f(v)
    return (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)


def ref_forward(model, values, x, t):
    """Plain per-layer re-implementation of the FiLM-residual MLP."""
    arch = model.arch
    H, E, T = arch.hidden, arch.time_embed_dim, arch.T
    freqs = np.geomspace(1.0, T, E // 2)
    ang = (t / T) * freqs
    e = np.concatenate([np.sin(ang), np.cos(ang)])
    pos = [0]

    def take(o, i):
        W = values[pos[0]:pos[0] + o * i].reshape(o, i)
        pos[0] += o * i
        b = values[pos[0]:pos[0] + o]
        pos[0] += o
        return W, b

    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    act = lambda z: z * sig(z)
    W, b = take(H, arch.data_dim)
    h = W @ x + b
    for _ in range(arch.n_blocks):
        Wf, bf = take(2 * H, E)
        W1, b1 = take(H, H)
        W2, b2 = take(H, H)
        f = Wf @ e + bf
        z1 = W1 @ act(h) + b1
        m = z1 * (1 + f[:H]) + f[H:]
        h = h + W2 @ act(m) + b2
    W, b = take(arch.data_dim, H)
    return W @ h + b


def fd4_adaptive(f, theta, j, steps=(3e-2, 1e-2, 3e-3, 1e-3)):
    """fd4 with the step chosen per output by self-consistency.

    For each output, the adjacent pair of step sizes whose estimates agree
    best is taken and the smaller step's estimate returned. This tracks the
    truncation/round-off trade-off for derivatives far below the output scale.
    """
    est = np.array([fd4(f, theta, j, theta.dtype.type(h)) for h in steps])
    gaps = np.abs(np.diff(est, axis=0))
    pick = np.argmin(gaps, axis=0) + 1
    return est[pick, np.arange(est.shape[1])]
