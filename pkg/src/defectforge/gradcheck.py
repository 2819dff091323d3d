"""Central finite-difference gradient checking for the hand-written backwards."""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_difference_gradient(
    func: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function at x, one component at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = func(x)
        flat[i] = orig - h
        fm = func(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Per-component |a - n| / max(|a|, |n|, 1) (absolute error for tiny values)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return np.abs(a - n) / denom


def check_gradient(
    func: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    h: float = 1e-5,
    bulk_tol: float = 1e-4,
    max_tol: float = 1e-2,
    bulk_fraction: float = 0.99,
) -> tuple[bool, np.ndarray]:
    """True iff >= bulk_fraction of components are within bulk_tol and every
    component is within max_tol of the central finite difference."""
    numeric = finite_difference_gradient(func, x, h)
    errs = relative_errors(analytic, numeric)
    ok = (np.mean(errs < bulk_tol) >= bulk_fraction) and bool(np.all(errs < max_tol))
    return ok, errs
