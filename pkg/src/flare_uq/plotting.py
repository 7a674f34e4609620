"""SVG figures for reports. Output is byte-stable across runs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "flare-uq"
plt.rcParams["svg.fonttype"] = "none"

_META = {"Date": None, "Creator": None}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def score_scatter(samples: np.ndarray, scores: np.ndarray, path, title: str = "",
                  keep=None) -> None:
    """2-D scatter coloured by score percentile; sequences are drawn as lines."""
    samples = np.asarray(samples)
    pct = np.argsort(np.argsort(scores)) / max(len(scores) - 1, 1)
    fig, ax = plt.subplots(figsize=(5, 4))
    if samples.shape[1] == 2:
        sc = ax.scatter(samples[:, 0], samples[:, 1], c=pct, s=6, cmap="viridis")
        if keep is not None:
            ax.scatter(samples[keep, 0], samples[keep, 1], facecolors="none",
                       edgecolors="k", s=14, linewidths=0.4)
        ax.set_xlabel("x0")
        ax.set_ylabel("x1")
        fig.colorbar(sc, ax=ax, label="uncertainty percentile")
    else:
        cmap = plt.get_cmap("viridis")
        tau = np.linspace(0, 1, samples.shape[1])
        order = np.argsort(pct)
        for i in order[:: max(1, len(order) // 200)]:
            ax.plot(tau, samples[i], color=cmap(pct[i]), lw=0.5, alpha=0.7)
        ax.set_xlabel("tau")
        ax.set_ylabel("x")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def loglog_line(x, y, path, xlabel: str, ylabel: str, title: str = "", ref_slope=None) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(x, y, "o-", label="measured")
    if ref_slope is not None:
        x = np.asarray(x, dtype=float)
        ax.loglog(x, y[0] * (x / x[0]) ** ref_slope, "--", label=f"slope {ref_slope:g}")
        ax.legend()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def line(x, y, path, xlabel: str, ylabel: str, title: str = "", logx: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(x, y, "o-")
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
