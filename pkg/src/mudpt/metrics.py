from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Percentage of matching entries, rounded to 2 decimals."""
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise InvalidInputError(f"predictions {p.shape} and labels {y.shape} must be equal-length vectors")
    if p.size == 0:
        raise InvalidInputError("accuracy of an empty set")
    return round(100.0 * float(np.count_nonzero(p == y)) / p.size, 2)


def harmonic_mean(base: float, new: float) -> float:
    """``2 * base * new / (base + new)``, rounded to 2 decimals."""
    if not (base > 0 and new > 0):
        raise InvalidInputError(f"harmonic mean needs positive inputs, got {base}, {new}")
    return round(2.0 * base * new / (base + new), 2)


def average(values: Iterable[float]) -> float:
    """Arithmetic mean, unrounded (reports round at emission)."""
    vals = [float(v) for v in values]
    if not vals:
        raise InvalidInputError("average of an empty list")
    return sum(vals) / len(vals)
