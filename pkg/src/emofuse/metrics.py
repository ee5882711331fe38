"""Evaluation metric and cross-validation fold planning."""

from __future__ import annotations

import numpy as np

from .data import N_CLASSES
from .errors import ArgumentError


def weighted_f1(predictions, labels) -> float:
    """Support-weighted mean of per-class F1 over the 6 emotion classes.

    Per-class F1 = 2PR/(P+R), with 0/0 taken as 0. Classes absent from the
    labels carry zero support and so contribute nothing.
    """
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise ArgumentError(f"predictions shape {preds.shape} vs labels shape {labs.shape}")
    if preds.size == 0:
        raise ArgumentError("cannot score an empty prediction set")
    for name, arr in (("prediction", preds), ("label", labs)):
        if arr.min() < 0 or arr.max() >= N_CLASSES:
            raise ArgumentError(f"{name} values must lie in 0..{N_CLASSES - 1}")

    total = 0.0
    for c in range(N_CLASSES):
        support = int((labs == c).sum())
        if support == 0:
            continue
        tp = int(((preds == c) & (labs == c)).sum())
        pred_c = int((preds == c).sum())
        precision = tp / pred_c if pred_c else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        total += support * f1
    return total / labs.size


def kfold_split(ids, k_folds: int, seed: int):
    """Seeded shuffle then contiguous chunks; the first n % k folds get one extra."""
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.size
    if k_folds < 1:
        raise ArgumentError(f"k_folds must be positive, got {k_folds}")
    if k_folds > n:
        raise ArgumentError(f"cannot split {n} samples into {k_folds} folds")
    perm = ids[np.random.default_rng(seed).permutation(n)]
    base, extra = divmod(n, k_folds)
    folds = []
    start = 0
    for f in range(k_folds):
        size = base + (1 if f < extra else 0)
        folds.append(perm[start : start + size].copy())
        start += size
    return folds


def format_mean_std(scores) -> str:
    """Render fold scores as a percent string like 71.32±0.54 (population std)."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ArgumentError("no scores to format")
    return f"{100 * arr.mean():.2f}±{100 * arr.std(ddof=0):.2f}"
