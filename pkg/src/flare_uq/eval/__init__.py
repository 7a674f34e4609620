"""Evaluation harness: metrics, discriminator protocol and validation studies."""

from .metrics import (
    accuracy,
    balanced_accuracy,
    bootstrap_p,
    filter_by_score,
    gap_closure,
    n_retained,
    paired_bootstrap,
    roc_auc,
)
from .protocol import MetricsReport, evaluate_filtering

__all__ = [
    "MetricsReport",
    "accuracy",
    "balanced_accuracy",
    "bootstrap_p",
    "evaluate_filtering",
    "filter_by_score",
    "gap_closure",
    "n_retained",
    "paired_bootstrap",
    "roc_auc",
]
