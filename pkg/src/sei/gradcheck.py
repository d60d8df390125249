"""Central finite differences for spot-checking analytic gradients.

Used by the CLI demos; the test suite carries its own independent checker.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = ["central_difference", "relative_error", "sample_flat_indices"]


def central_difference(fn: Callable[[], float], array: np.ndarray, flat_index: int, eps: float = 1e-4) -> float:
    """Numeric d(fn)/d(array.flat[flat_index]) by symmetric perturbation in place."""
    flat = array.reshape(-1)
    original = flat[flat_index]
    flat[flat_index] = original + eps
    f_plus = fn()
    flat[flat_index] = original - eps
    f_minus = fn()
    flat[flat_index] = original
    return (f_plus - f_minus) / (2.0 * eps)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    """|a - b| scaled by the larger magnitude, floored to ignore noise near zero."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def sample_flat_indices(rng: np.random.Generator, size: int, count: int) -> list[int]:
    """Up to ``count`` distinct flat indices into an array of ``size`` elements."""
    if size <= count:
        return list(range(size))
    return sorted(int(i) for i in rng.choice(size, size=count, replace=False))
