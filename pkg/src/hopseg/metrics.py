"""Segmentation overlap metrics."""

from __future__ import annotations

import numpy as np

from .errors import InvalidShapeError


def dsc(x: np.ndarray, y: np.ndarray) -> float:
    """Dice similarity 2|X n Y| / (|X| + |Y|) of two binary masks.

    Two empty masks agree perfectly (1.0); empty versus non-empty is 0.0.
    """
    x = np.asarray(x).astype(bool)
    y = np.asarray(y).astype(bool)
    if x.shape != y.shape:
        raise InvalidShapeError(f"mask shapes differ: {x.shape} vs {y.shape}")
    nx = int(x.sum())
    ny = int(y.sum())
    if nx + ny == 0:
        return 1.0
    inter = int(np.logical_and(x, y).sum())
    return 2.0 * inter / (nx + ny)


def dsc_per_class(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> list[float]:
    """One-vs-rest DSC for every foreground class 1..n_classes-1."""
    return [dsc(pred == c, truth == c) for c in range(1, n_classes)]
