"""Central finite differences for mixed partials up to fourth order.

Steps are relative to the coordinate (never smaller than the base step) and
grow with the derivative order, then one Richardson extrapolation removes the
h**2 term of the nested central difference.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

BASE_STEPS = {1: 1e-3, 2: 2e-3, 3: 5e-3, 4: 1e-2}


def step_sizes(x: np.ndarray, order: int, base: Optional[float] = None) -> np.ndarray:
    if base is None:
        base = BASE_STEPS.get(order, BASE_STEPS[4])
    return base * np.maximum(np.abs(x), 1.0)


def _nested_central(f, x, index, steps):
    if not index:
        return np.asarray(f(x), dtype=float)
    j = index[0]
    shift = np.zeros_like(x)
    shift[j] = steps[j]
    upper = _nested_central(f, x + shift, index[1:], steps)
    lower = _nested_central(f, x - shift, index[1:], steps)
    return (upper - lower) / (2.0 * steps[j])


def partial(
    f: Callable[[np.ndarray], object],
    x: Sequence[float],
    index: Sequence[int],
    base: Optional[float] = None,
    richardson: bool = True,
):
    """Mixed partial of ``f`` at ``x`` with respect to the coordinates in ``index``.

    ``f`` may return a scalar or an array; the result has the same shape.
    """
    x = np.asarray(x, dtype=float)
    index = tuple(int(i) for i in index)
    if not index:
        return np.asarray(f(x), dtype=float)
    steps = step_sizes(x, len(index), base)
    coarse = _nested_central(f, x, index, steps)
    if not richardson:
        return coarse
    fine = _nested_central(f, x, index, steps / 2.0)
    return (4.0 * fine - coarse) / 3.0


def gradient(
    f: Callable[[np.ndarray], object],
    x: Sequence[float],
    coords: Optional[Sequence[int]] = None,
    base: Optional[float] = None,
) -> np.ndarray:
    """Stack of first partials; axis 0 runs over ``coords`` (default: all)."""
    x = np.asarray(x, dtype=float)
    if coords is None:
        coords = range(x.size)
    return np.stack([partial(f, x, (j,), base=base) for j in coords])
