"""Central finite-difference gradient oracle (double precision).

Used by the test suite to validate every analytic backward pass. The oracle
never calls the backward code it checks: it probes the forward function
alone, in float64, with a central difference of the given step.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-3
) -> np.ndarray:
    """d f / d x by central differences, elementwise, in float64."""
    x = x.astype(np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(x)
        flat[i] = orig - step
        f_minus = f(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |a|, |n|), a scale-aware elementwise residual."""
    a = analytic.astype(np.float64).ravel()
    n = numeric.astype(np.float64).ravel()
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
