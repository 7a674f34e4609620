"""Uncertainty-filtering evaluation with one shared discriminator.

The discriminator is trained once on 70% of the real data against 70% of
the (unfiltered) generated samples. Each method then filters the held-out
generated samples by its scores, and the held-out real set is compared
against the unfiltered and the filtered generated sets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from ..errors import UndefinedBaseline
from .discriminator import split_70_30, train_discriminator
from .metrics import (
    balanced_accuracy,
    bootstrap_p,
    filter_by_score,
    gap_closure,
    n_retained,
    paired_bootstrap,
    roc_auc,
)


@dataclass
class MetricsReport:
    dataset: str
    method: str
    acc_unfiltered: float
    acc_filtered: float
    gap_closure_pct: Optional[float]
    roc_auc: float
    roc_auc_unfiltered: float
    bootstrap_p: Optional[float]
    n_generated: int
    n_retained: int
    percentile: float
    seed: int

    def to_dict(self):
        return asdict(self)


def evaluate_filtering(real: np.ndarray, generated: np.ndarray, scores: Dict[str, np.ndarray],
                       percentile: float, seed: int = 0, B: int = 1000, dataset: str = "",
                       disc_steps: int = 10000, disc_width: int = 64,
                       compare: Optional[Dict[str, tuple]] = None) -> dict:
    """Reports per method plus optional paired comparisons.

    ``compare`` maps a label to (method_a, method_b, stat) with stat "gc"
    (claim: gc_a >= gc_b) or "auc" (claim: |auc_a - .5| <= |auc_b - .5|).
    """
    rng = np.random.default_rng([seed, 11])
    sp = split_70_30(len(real), len(generated), rng)
    disc = train_discriminator(real[sp.real_train], generated[sp.gen_train],
                               np.random.default_rng([seed, 12]), width=disc_width,
                               steps=disc_steps)
    d_real = disc.score(real[sp.real_eval])
    d_gen = disc.score(generated[sp.gen_eval])
    acc_uf = balanced_accuracy(d_real, d_gen)
    auc_uf = roc_auc(d_real, d_gen)
    reports = {}
    for k, name in enumerate(sorted(scores)):
        s = np.asarray(scores[name])[sp.gen_eval]
        keep = filter_by_score(s, percentile, ids=sp.gen_eval)
        acc_f = balanced_accuracy(d_real, d_gen[keep])
        try:
            gc = gap_closure(acc_f, acc_uf)
            p = bootstrap_p(d_real, d_gen[keep], d_gen, B, np.random.default_rng([seed, 13, k]))
        except UndefinedBaseline:
            gc, p = None, None
        reports[name] = MetricsReport(
            dataset, name, acc_uf, acc_f, gc, roc_auc(d_real, d_gen[keep]), auc_uf, p,
            int(len(sp.gen_eval)), n_retained(len(sp.gen_eval), percentile), float(percentile),
            int(seed))
    comparisons = {}
    for j, (label, (a, b, stat)) in enumerate(sorted((compare or {}).items())):
        res = paired_bootstrap(d_real, d_gen, np.asarray(scores[a])[sp.gen_eval],
                               np.asarray(scores[b])[sp.gen_eval], percentile, stat, B,
                               np.random.default_rng([seed, 14, j]))
        comparisons[label] = {"a": a, "b": b, "stat": stat, **res}
    return {
        "reports": {k: v.to_dict() for k, v in reports.items()},
        "comparisons": comparisons,
        "discriminator": {"n_real_eval": int(len(sp.real_eval)),
                          "n_gen_eval": int(len(sp.gen_eval)), "steps": disc_steps,
                          "width": disc_width},
        "held_out": {"d_real": d_real, "d_gen": d_gen, "gen_eval": sp.gen_eval},
    }
