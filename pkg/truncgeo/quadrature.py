"""Adaptive Gauss-Kronrod quadrature over the one-sided support [gamma, I2).

The support is pulled back to the unit interval by a tail map, then the
panel with the largest error estimate is bisected until the summed error
meets the tolerance. Integrands are vectorized: they take an array of
abscissae and may return one value or a row of values per abscissa, so a
whole tensor of expectations shares one adaptive run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from truncgeo.exceptions import QuadratureError

logger = logging.getLogger(__name__)

# 15-point Kronrod extension of the 7-point Gauss rule on [-1, 1].
_XGK = np.array(
    [
        0.991455371120812639206854697526329,
        0.949107912342758524526189684047851,
        0.864864423359769072789712788640926,
        0.741531185599394439863864773280788,
        0.586087235467691130294144845693013,
        0.405845151377397166906606412076961,
        0.207784955007898467600689403773245,
        0.000000000000000000000000000000000,
    ]
)
_WGK = np.array(
    [
        0.022935322010529224963732008058970,
        0.063092092629978553290700663189204,
        0.104790010322250183839876322541518,
        0.140653259715525918745189590510238,
        0.169004726639267902826583426598550,
        0.190350578064785409913256402421014,
        0.204432940075298892414161999234649,
        0.209482141084727828012999174891714,
    ]
)
# Gauss weights live on the odd Kronrod nodes (indices 1, 3, 5, 7).
_WG = np.array(
    [
        0.129484966168869693270611432679082,
        0.279705391489276667901467771423780,
        0.381830050505118944950369775488975,
        0.417959183673469387755102040816327,
    ]
)

NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
KRONROD_WEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
GAUSS_WEIGHTS = np.zeros(15)
GAUSS_WEIGHTS[[1, 3, 5]] = _WG[:3]
GAUSS_WEIGHTS[[13, 11, 9]] = _WG[:3]
GAUSS_WEIGHTS[7] = _WG[3]

TAIL_KINDS = ("rational", "exponential", "probit", "linear")


@dataclass(frozen=True)
class TailMap:
    """Map u in [0, 1) onto [lower, upper).

    rational:    x = lower + scale * u / (1 - u)
    exponential: x = lower - scale * log(1 - u)
    probit:      upper tail of N(center, scale**2) beyond ``lower``
    linear:      x = lower + (upper - lower) * u, finite ``upper`` only
    """

    kind: str
    lower: float
    scale: float = 1.0
    center: float = 0.0
    upper: float = math.inf

    def __post_init__(self):
        if self.kind not in TAIL_KINDS:
            raise ValueError(f"unknown tail map {self.kind!r}")
        if self.kind == "linear" and not math.isfinite(self.upper):
            raise ValueError("linear tail map needs a finite upper limit")
        if not self.scale > 0:
            raise ValueError(f"tail map scale must be positive, got {self.scale}")

    def transform(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (x, dx/du) at the unit-interval points ``u``."""
        u = np.asarray(u, dtype=float)
        if self.kind == "rational":
            rest = 1.0 - u
            return self.lower + self.scale * u / rest, self.scale / rest**2
        if self.kind == "exponential":
            rest = 1.0 - u
            return self.lower - self.scale * np.log1p(-u), self.scale / rest
        if self.kind == "linear":
            width = self.upper - self.lower
            return self.lower + width * u, np.full_like(u, width)
        nu = (self.lower - self.center) / self.scale
        log_mass = np.log1p(-u) + special.log_ndtr(-nu)
        z = special.ndtri_exp(log_mass)
        log_phi = -0.5 * z * z - 0.5 * math.log(2.0 * math.pi)
        x = self.center - self.scale * z
        return x, self.scale * np.exp(log_mass - log_phi - np.log1p(-u))


def rescaled(tail: TailMap, kind: str) -> TailMap:
    """Replace the model's preferred tail map by a generic one of ``kind``."""
    if kind == tail.kind:
        return tail
    if kind == "linear":
        return TailMap("linear", tail.lower, upper=tail.upper)
    return TailMap(kind, tail.lower, scale=tail.scale, center=tail.center)


@dataclass(frozen=True)
class QuadratureConfig:
    rel_tol: float = 1e-9
    abs_tol: float = 1e-12
    max_subdivisions: int = 200
    tail_map: str = "auto"
    initial_panels: int = 8

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("quadrature tolerances must be positive")
        if self.max_subdivisions < 1:
            raise ValueError("max_subdivisions must be at least 1")
        if self.tail_map != "auto" and self.tail_map not in TAIL_KINDS:
            raise ValueError(f"unknown tail map {self.tail_map!r}")


@dataclass(frozen=True)
class QuadResult:
    value: np.ndarray
    error: np.ndarray
    panels: int = field(default=0)


def _gk_panels(g, lefts: np.ndarray, rights: np.ndarray):
    half = 0.5 * (rights - lefts)
    mid = 0.5 * (rights + lefts)
    u = mid[:, None] + half[:, None] * NODES[None, :]
    raw = np.asarray(g(u.ravel()), dtype=float)
    values = raw.reshape(len(lefts), NODES.size, -1)
    kronrod = np.einsum("j,pjk->pk", KRONROD_WEIGHTS, values) * half[:, None]
    gauss = np.einsum("j,pjk->pk", GAUSS_WEIGHTS, values) * half[:, None]
    return kronrod, np.abs(kronrod - gauss), raw.ndim == 1


def integrate_unit(g, cfg: QuadratureConfig | None = None) -> QuadResult:
    """Integrate the vectorized ``g`` over [0, 1]."""
    cfg = cfg or QuadratureConfig()
    edges = np.linspace(0.0, 1.0, cfg.initial_panels + 1)
    lefts, rights = edges[:-1], edges[1:]
    estimates, errors, scalar = _gk_panels(g, lefts, rights)
    while True:
        total = estimates.sum(axis=0)
        error = errors.sum(axis=0)
        tol = np.maximum(cfg.abs_tol, cfg.rel_tol * np.abs(total))
        if np.all(error <= tol):
            break
        if len(lefts) >= cfg.max_subdivisions:
            logger.warning(
                f"quadrature stopped at {len(lefts)} panels, "
                f"error {error.max():.3g} above tolerance"
            )
            raise QuadratureError(
                f"no convergence within {cfg.max_subdivisions} subdivisions",
                estimate=total[0] if scalar else total,
                error=error[0] if scalar else error,
            )
        worst = int(np.argmax((errors / tol).max(axis=1)))
        a, b = lefts[worst], rights[worst]
        m = 0.5 * (a + b)
        new_est, new_err, _ = _gk_panels(g, np.array([a, m]), np.array([m, b]))
        keep = np.arange(len(lefts)) != worst
        lefts = np.concatenate([lefts[keep], [a, m]])
        rights = np.concatenate([rights[keep], [m, b]])
        estimates = np.concatenate([estimates[keep], new_est])
        errors = np.concatenate([errors[keep], new_err])
    if scalar:
        return QuadResult(total[0], error[0], len(lefts))
    return QuadResult(total, error, len(lefts))


def integrate_support(f, tail: TailMap, cfg: QuadratureConfig | None = None) -> QuadResult:
    """Integrate the vectorized ``f(x)`` over [tail.lower, tail.upper)."""

    def pulled_back(u):
        x, jac = tail.transform(u)
        reachable = np.isfinite(x) & np.isfinite(jac)
        x = np.where(reachable, x, tail.lower)
        values = np.asarray(f(x), dtype=float)
        if values.ndim > 1:
            jac = jac[:, None]
            reachable = reachable[:, None]
        # nodes mapped past the float range carry no mass
        return np.where(reachable, values * np.where(reachable, jac, 0.0), 0.0)

    return integrate_unit(pulled_back, cfg)
