"""Central finite differences, the oracle for every backward rule."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5,
                   indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    ``f`` re-evaluates the scalar objective from scratch. With ``indices``
    only those entries are filled; the rest stay zero.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    if indices is None:
        indices = np.ndindex(*x.shape)
    for ix in indices:
        orig = x[ix]
        x[ix] = orig + step
        fp = f()
        x[ix] = orig - step
        fm = f()
        x[ix] = orig
        grad[ix] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |n|), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
