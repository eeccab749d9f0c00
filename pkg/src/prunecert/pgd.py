"""Projected gradient ascent over l-inf boxes and l2 balls around states."""
from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from . import numcore as nc


def project(X: np.ndarray, S: np.ndarray, epsilon: float, norm_p: float = math.inf) -> np.ndarray:
    """Nearest point of the radius-``epsilon`` ball around each row of ``S``
    (exact clamp for l-inf, radial rescale for l2)."""
    if norm_p == math.inf:
        return np.clip(X, S - epsilon, S + epsilon)
    if norm_p != 2:
        raise ValueError("norm_p must be 2 or inf")
    D = X - S
    r = np.linalg.norm(D, axis=-1, keepdims=True)
    scale = np.where(r > epsilon, epsilon / np.maximum(r, 1e-300), 1.0)
    return S + D * scale


def _direction(g: np.ndarray, norm_p: float) -> np.ndarray:
    if norm_p == math.inf:
        return np.sign(g)
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return np.where(n > 0, g / np.maximum(n, 1e-300), 0.0)


def projected_ascent(objective: Callable, S, epsilon: float, steps: int, step_size: float, *,
                     start: Optional[np.ndarray] = None, norm_p: float = math.inf) -> tuple[np.ndarray, np.ndarray]:
    """Maximize a per-row objective over the ball around each state.

    ``objective`` maps a batch (array or tape tensor) to one value per row;
    rows must not interact. The unperturbed state counts as an iterate, so
    the returned value is never below ``objective(S)``.
    """
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    best_x = S.copy()
    best_val = np.asarray(nc.value_of(objective(S)), dtype=np.float64).copy()
    if epsilon == 0 or steps == 0:
        return best_x, best_val
    X = project(S.copy() if start is None else np.asarray(start, dtype=np.float64), S, epsilon, norm_p)
    for k in range(steps + 1):
        tape = nc.Tape()
        x = tape.leaf(X)
        obj = objective(x)
        val = np.asarray(obj.value)
        better = val > best_val
        best_x[better], best_val[better] = X[better], val[better]
        if k == steps:
            break
        g = nc.backward(tape, obj, np.ones_like(val)).get(x.index, np.zeros_like(X))
        X = project(X + step_size * _direction(g, norm_p), S, epsilon, norm_p)
    return best_x, best_val
