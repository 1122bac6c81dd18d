"""Normal upper-tail functions and chain-rule composition.

The truncated normal normalizer is written through

    Psi(v) = log(1 - Phi(v))

and its derivatives, which are all polynomials in v and the inverse Mills
ratio lambda(v) = phi(v) / (1 - Phi(v)).
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special

MAX_ORDER = 4

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def log_upper_tail(v):
    """Psi(v) = log(1 - Phi(v)), accurate far into both tails."""
    return special.log_ndtr(-np.asarray(v, dtype=float))


def mills_ratio(v):
    v = np.asarray(v, dtype=float)
    return np.exp(-0.5 * v * v - _LOG_SQRT_2PI - special.log_ndtr(-v))


def log_upper_tail_derivatives(v, order: int = MAX_ORDER) -> list:
    """Return [Psi(v), Psi'(v), ..., Psi^(order)(v)].

    Uses Psi' = -lambda and the recursion for the derivatives of lambda,
    lambda' = lambda (lambda - v).
    """
    if not 0 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in [0, {MAX_ORDER}], got {order}")
    v = np.asarray(v, dtype=float)
    lam = mills_ratio(v)
    gap = lam - v
    lam1 = lam * gap
    lam2 = lam1 * gap + lam * (lam1 - 1.0)
    lam3 = lam2 * gap + 2.0 * lam1 * (lam1 - 1.0) + lam * lam2
    values = [log_upper_tail(v), -lam, -lam1, -lam2, -lam3]
    return values[: order + 1]


def set_partitions(n: int) -> Iterator[list[list[int]]]:
    """Yield every partition of {0, ..., n-1} into non-empty blocks."""
    if n == 0:
        yield []
        return
    for partition in set_partitions(n - 1):
        for i in range(len(partition)):
            yield partition[:i] + [partition[i] + [n - 1]] + partition[i + 1 :]
        yield partition + [[n - 1]]


def compose_partial(
    outer: Sequence,
    inner: Callable[[tuple[int, ...]], object],
    index: tuple[int, ...],
):
    """Mixed partial of f(h(z)) by the multivariate Faa di Bruno formula.

    ``outer[k]`` holds f^(k) evaluated at h(z) and ``inner(idx)`` returns the
    mixed partial of h for a tuple of coordinate indices.
    """
    if not index:
        return outer[0]
    if len(index) >= len(outer):
        raise ValueError(
            f"need {len(index)} outer derivatives, only {len(outer) - 1} given"
        )
    total = 0.0
    for partition in set_partitions(len(index)):
        term = outer[len(partition)]
        for block in partition:
            term = term * inner(tuple(index[i] for i in block))
        total = total + term
    return total
