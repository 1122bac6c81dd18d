"""Expectations over the truncated support and the moment tensors A^(r,s)."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from truncgeo.exceptions import DomainError
from truncgeo.models import (
    MAX_DERIVATIVE_ORDER,
    ModelSpec,
    ParamPoint,
    log_q_partial,
    psi_partial,
    psi_value,
)
from truncgeo.quadrature import QuadratureConfig, integrate_support

logger = logging.getLogger(__name__)

__all__ = [
    "ATensor",
    "Expectation",
    "QuadratureConfig",
    "a_tensor",
    "c_value",
    "expect",
    "score_products",
]


class Expectation(NamedTuple):
    value: object
    error: object


def expect(
    model: ModelSpec,
    p: ParamPoint,
    integrand: Callable[[np.ndarray], object],
    cfg: Optional[QuadratureConfig] = None,
) -> Expectation:
    """E[integrand(X)] under p(.; theta, gamma).

    The integrand is vectorized and may return one value or a row of values
    per abscissa; the quadrature runs once for the whole row.
    """
    model.check(p)
    cfg = cfg or QuadratureConfig()
    psi = psi_value(model, p)
    theta = p.theta_array

    def weighted(x):
        density = np.exp(model.log_q(x, theta) - psi)
        values = np.asarray(integrand(x), dtype=float)
        if values.ndim <= 1:
            return np.broadcast_to(values, density.shape) * density
        return values * density[:, None]

    result = integrate_support(weighted, model.tail_map(p, cfg.tail_map), cfg)
    return Expectation(result.value, result.error)


@dataclass(frozen=True, eq=False)
class ATensor:
    """A^(r,s) = E[D_theta^{(x)r} (d/dgamma)^s log p], stored flat in row-major order."""

    r: int
    s: int
    data: np.ndarray
    point: ParamPoint

    @property
    def d(self) -> int:
        return self.point.d

    @property
    def tensor(self) -> np.ndarray:
        return self.data.reshape((self.d,) * self.r)

    def __float__(self) -> float:
        if self.data.size != 1:
            raise TypeError(f"A^({self.r},{self.s}) has {self.data.size} entries")
        return float(self.data[0])


def _check_orders(r: int, s: int) -> None:
    if r < 0 or s < 0 or r + s > MAX_DERIVATIVE_ORDER:
        raise DomainError(f"A^({r},{s}) needs r, s >= 0 and r + s <= {MAX_DERIVATIVE_ORDER}")


def fill_symmetric(d: int, r: int, values: dict) -> np.ndarray:
    data = np.empty(d**r)
    for flat, idx in enumerate(itertools.product(range(d), repeat=r)):
        data[flat] = values[tuple(sorted(idx))]
    return data


def a_tensor(
    model: ModelSpec,
    p: ParamPoint,
    r: int,
    s: int,
    cfg: Optional[QuadratureConfig] = None,
    shortcut: bool = False,
) -> ATensor:
    """Expected mixed partials of log p, r-fold in theta and s-fold in gamma.

    With ``shortcut`` the expectation is skipped wherever log q drops out of
    the partial (any gamma derivative, or r >= 2 on an oTEF): there the
    value is -D psi, and A^(1,0) = 0 on an oTEF.
    """
    model.check(p)
    _check_orders(r, s)
    d = model.d
    unique = list(itertools.combinations_with_replacement(range(d), r))
    gamma_part = (d,) * s
    constants = [psi_partial(model, p, idx + gamma_part) for idx in unique]

    if shortcut and (s > 0 or model.is_otef):
        if s == 0 and r == 1:
            values = dict.fromkeys(unique, 0.0)
        else:
            values = {idx: -c for idx, c in zip(unique, constants)}
        return ATensor(r, s, fill_symmetric(d, r, values), p)

    theta = p.theta_array

    def integrand(x):
        columns = []
        for idx, const in zip(unique, constants):
            if s > 0:
                columns.append(np.full_like(x, -const))
            else:
                columns.append(log_q_partial(model, x, theta, idx) - const)
        return np.stack(columns, axis=-1)

    result = expect(model, p, integrand, cfg)
    values = dict(zip(unique, np.atleast_1d(result.value)))
    return ATensor(r, s, fill_symmetric(d, r, values), p)


def c_value(model: ModelSpec, p: ParamPoint, cfg: Optional[QuadratureConfig] = None) -> float:
    """c = A^(0,1) = -d psi / d gamma."""
    return float(a_tensor(model, p, 0, 1, cfg))


def score_products(
    model: ModelSpec, p: ParamPoint, cfg: Optional[QuadratureConfig] = None
) -> tuple[np.ndarray, np.ndarray]:
    """E[d_i l d_j l d_k l] and E[(d_i d_j l)(d_k l)] over the regular block."""
    d = model.d
    theta = p.theta_array
    first = [psi_partial(model, p, (i,)) for i in range(d)]
    pairs = list(itertools.combinations_with_replacement(range(d), 2))
    second = {ij: psi_partial(model, p, ij) for ij in pairs}

    def integrand(x):
        score = np.stack(
            [log_q_partial(model, x, theta, (i,)) - first[i] for i in range(d)], axis=-1
        )
        hess = np.empty(x.shape + (d, d))
        for i, j in pairs:
            hess[..., i, j] = hess[..., j, i] = (
                log_q_partial(model, x, theta, (i, j)) - second[(i, j)]
            )
        triple = np.einsum("mi,mj,mk->mijk", score, score, score)
        mixed = np.einsum("mij,mk->mijk", hess, score)
        return np.concatenate(
            [triple.reshape(len(x), -1), mixed.reshape(len(x), -1)], axis=-1
        )

    values = np.asarray(expect(model, p, integrand, cfg).value)
    size = d**3
    return values[:size].reshape(d, d, d), values[size:].reshape(d, d, d)
