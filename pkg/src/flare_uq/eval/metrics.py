"""Classification metrics, score-based filtering and bootstrap tests."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from ..errors import InvalidArgument, UndefinedBaseline

THRESHOLD = 0.5


def accuracy(scores, labels, threshold: float = THRESHOLD) -> float:
    """Fraction correct when score >= threshold predicts class 1."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size == 0:
        raise InvalidArgument("accuracy of an empty set is undefined")
    if s.shape != y.shape:
        raise InvalidArgument("scores and labels differ in length")
    return float(np.mean((s >= threshold) == (y == 1)))


def balanced_accuracy(pos_scores, neg_scores, threshold: float = THRESHOLD) -> float:
    """Mean of the per-class accuracies (class 1 = ``pos_scores``)."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise InvalidArgument("both classes must be non-empty")
    return 0.5 * (float(np.mean(pos >= threshold)) + float(np.mean(neg < threshold)))


def roc_auc(pos_scores, neg_scores) -> float:
    """P(s+ > s-) with ties counted one half, via the rank-sum statistic."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise InvalidArgument("roc_auc needs both positive and negative scores")
    ranks = rankdata(np.concatenate([pos, neg]))
    n1, n0 = pos.size, neg.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def gap_closure(acc_filtered: float, acc_unfiltered: float) -> float:
    """Percent of the distance from chance removed by filtering; +100 is perfect."""
    base = abs(0.5 - acc_unfiltered)
    if base == 0.0:
        raise UndefinedBaseline("unfiltered accuracy is exactly chance")
    return 100.0 * (base - abs(0.5 - acc_filtered)) / base


def n_retained(n: int, percent: float) -> int:
    if not 0.0 < percent <= 100.0:
        raise InvalidArgument("percentile must lie in (0, 100]")
    # guard the float product against representation error (e.g. 0.29 * 100)
    return int(math.floor(percent * n / 100.0 + 1e-9))


def filter_by_score(scores, percent: float, ids=None) -> np.ndarray:
    """Positions of the floor(p% n) lowest scores, ties broken by id.

    Returned positions are ordered by (score, id).
    """
    s = np.asarray(scores, dtype=np.float64)
    ids = np.arange(s.size) if ids is None else np.asarray(ids)
    if ids.shape != s.shape:
        raise InvalidArgument("scores and ids differ in length")
    k = n_retained(s.size, percent)
    order = np.lexsort((ids, s))
    return order[:k]


def bootstrap_p(d_real, d_gen_filtered, d_gen_unfiltered, B: int = 1000, rng=0) -> float:
    """One-sided bootstrap p-value for H0: gap-closure <= 0.

    Inputs are fixed discriminator scores. Each replicate resamples the two
    generated sets with replacement; the real set stays fixed.
    p = (1 + #{GC* <= 0}) / (B + 1).
    """
    if B < 100:
        raise InvalidArgument("bootstrap needs B >= 100")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    real = np.asarray(d_real, dtype=np.float64)
    f = np.asarray(d_gen_filtered, dtype=np.float64)
    u = np.asarray(d_gen_unfiltered, dtype=np.float64)
    real_acc = float(np.mean(real >= THRESHOLD))
    hits = 0
    for _ in range(B):
        fs = f[rng.integers(0, f.size, f.size)]
        us = u[rng.integers(0, u.size, u.size)]
        acc_uf = 0.5 * (real_acc + float(np.mean(us < THRESHOLD)))
        acc_f = 0.5 * (real_acc + float(np.mean(fs < THRESHOLD)))
        try:
            gc = gap_closure(acc_f, acc_uf)
        except UndefinedBaseline:
            gc = 0.0
        hits += gc <= 0.0
    return (1 + hits) / (B + 1)


def paired_bootstrap(d_real, d_gen, scores_a, scores_b, percent: float, stat: str,
                     B: int = 1000, rng=0) -> dict:
    """Paired bootstrap comparing two filtering methods on one generated set.

    Each replicate resamples the generated set once and filters it with both
    methods' scores.  ``stat`` selects the comparison:

    - ``"gc"``: H0 gc_a < gc_b, p = (1 + #{gc_a* - gc_b* < 0}) / (B + 1)
    - ``"auc"``: H0 |auc_a - .5| > |auc_b - .5|, counted analogously.
    """
    if stat not in ("gc", "auc"):
        raise InvalidArgument("stat must be 'gc' or 'auc'")
    if B < 100:
        raise InvalidArgument("bootstrap needs B >= 100")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    real = np.asarray(d_real, dtype=np.float64)
    gen = np.asarray(d_gen, dtype=np.float64)
    sa = np.asarray(scores_a, dtype=np.float64)
    sb = np.asarray(scores_b, dtype=np.float64)
    n = gen.size
    bad = 0
    diffs = np.empty(B)
    for r in range(B):
        rows = rng.integers(0, n, n)
        g = gen[rows]
        ka = filter_by_score(sa[rows], percent)
        kb = filter_by_score(sb[rows], percent)
        if stat == "gc":
            acc_uf = balanced_accuracy(real, g)
            try:
                da = gap_closure(balanced_accuracy(real, g[ka]), acc_uf)
                db = gap_closure(balanced_accuracy(real, g[kb]), acc_uf)
            except UndefinedBaseline:
                da = db = 0.0
            diffs[r] = da - db
        else:
            da = abs(roc_auc(real, g[ka]) - 0.5)
            db = abs(roc_auc(real, g[kb]) - 0.5)
            diffs[r] = db - da
        bad += diffs[r] < 0.0
    return {"p": (1 + bad) / (B + 1), "mean_diff": float(diffs.mean()),
            "ci95": [float(np.quantile(diffs, 0.025)), float(np.quantile(diffs, 0.975))]}
