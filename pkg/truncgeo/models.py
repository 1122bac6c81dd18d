"""One-sided truncated families.

A model has density p(x; theta, gamma) = q(x; theta) exp(-psi(theta, gamma))
on [gamma, I2). Coordinates of the full parameter are numbered 0..d-1 for
the regular parameter theta and d for the truncation parameter gamma; mixed
partials are addressed by tuples of these coordinate numbers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate as sp_integrate
from scipy import special

from truncgeo import numdiff
from truncgeo.exceptions import DomainError, NormalizationError, UnsupportedModelError
from truncgeo.quadrature import (
    QuadratureConfig,
    TailMap,
    integrate_support,
    rescaled,
)
from truncgeo.special import compose_partial, log_upper_tail_derivatives

logger = logging.getLogger(__name__)

MAX_DERIVATIVE_ORDER = 4

# psi by quadrature feeds finite differences, so it is integrated tighter
# than the default expectation tolerance.
PSI_QUADRATURE = QuadratureConfig(rel_tol=1e-13, abs_tol=1e-300, max_subdivisions=400)


@dataclass(frozen=True)
class ParamPoint:
    theta: tuple[float, ...]
    gamma: float

    @classmethod
    def of(cls, theta, gamma) -> "ParamPoint":
        return cls(tuple(float(t) for t in np.atleast_1d(theta)), float(gamma))

    @classmethod
    def from_vector(cls, vector) -> "ParamPoint":
        vector = np.asarray(vector, dtype=float)
        return cls(tuple(float(t) for t in vector[:-1]), float(vector[-1]))

    @property
    def d(self) -> int:
        return len(self.theta)

    @property
    def theta_array(self) -> np.ndarray:
        return np.array(self.theta, dtype=float)

    def as_vector(self) -> np.ndarray:
        return np.array([*self.theta, self.gamma], dtype=float)

    def to_dict(self) -> dict:
        return {"theta": list(self.theta), "gamma": self.gamma}


@dataclass(frozen=True, eq=False)
class Sample:
    values: np.ndarray

    @classmethod
    def from_values(cls, values) -> "Sample":
        values = np.sort(np.asarray(values, dtype=float).ravel())
        if values.size == 0:
            raise DomainError("a sample needs at least one value")
        values.setflags(write=False)
        return cls(values)

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def minimum(self) -> float:
        return float(self.values[0])


@dataclass(frozen=True)
class ExponentialPart:
    """log q(x; theta) = sum_i theta_i F_i(x) + M(x)."""

    statistics: Callable[[np.ndarray], np.ndarray]
    base: Callable[[np.ndarray], np.ndarray]

    def evaluate(self, x) -> np.ndarray:
        """F(x) with shape x.shape + (d,)."""
        x = np.asarray(x, dtype=float)
        return np.asarray(self.statistics(x), dtype=float).reshape(x.shape + (-1,))


@dataclass(frozen=True)
class ModelSpec:
    """An immutable one-sided truncated family.

    ``log_q`` and ``psi`` broadcast: theta carries the regular parameter on
    its last axis, x and gamma broadcast against theta[..., 0].
    """

    name: str
    d: int
    log_q: Callable
    param_names: tuple[str, ...] = ()
    theta_lower: tuple[float, ...] = ()
    theta_upper: tuple[float, ...] = ()
    trunc_interval: tuple[float, float] = (-math.inf, math.inf)
    psi: Optional[Callable] = None
    psi_partial: Optional[Callable] = None
    log_q_partial: Optional[Callable] = None
    otef: Optional[ExponentialPart] = None
    eta: Optional[Callable] = None
    eta_domain: Optional[Callable] = None
    sampler: Optional[Callable] = None
    tail: Optional[Callable] = None
    initial_theta: Optional[Callable] = None
    start: tuple[float, ...] = ()
    description: str = field(default="", compare=False)
    # canonical JSON of a config-defined family, empty for built-ins
    source: str = field(default="", compare=False)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be a positive integer")
        for attr in ("theta_lower", "theta_upper"):
            bounds = getattr(self, attr)
            fill = -math.inf if attr == "theta_lower" else math.inf
            if not bounds:
                object.__setattr__(self, attr, (fill,) * self.d)
            elif len(bounds) != self.d:
                raise ValueError(f"{attr} needs {self.d} entries")
        if not self.param_names:
            names = ("theta",) if self.d == 1 else tuple(f"theta{i + 1}" for i in range(self.d))
            object.__setattr__(self, "param_names", names)
        if not self.start:
            object.__setattr__(self, "start", tuple(self._box_center()))

    def _box_center(self) -> np.ndarray:
        center = []
        for lo, hi in zip(self.theta_lower, self.theta_upper):
            if math.isfinite(lo) and math.isfinite(hi):
                center.append(0.5 * (lo + hi))
            elif math.isfinite(lo):
                center.append(lo + 1.0)
            elif math.isfinite(hi):
                center.append(hi - 1.0)
            else:
                center.append(0.0)
        return np.array(center)

    @property
    def is_otef(self) -> bool:
        return self.otef is not None

    @property
    def has_closed_derivs(self) -> bool:
        return self.psi_partial is not None and self.log_q_partial is not None

    @property
    def upper(self) -> float:
        return self.trunc_interval[1]

    def theta_valid(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(
            theta.shape == (self.d,)
            and np.all(np.isfinite(theta))
            and np.all(theta > np.array(self.theta_lower))
            and np.all(theta < np.array(self.theta_upper))
        )

    def is_valid(self, p: ParamPoint) -> bool:
        lo, hi = self.trunc_interval
        return self.theta_valid(p.theta) and lo < p.gamma < hi

    def check(self, p: ParamPoint) -> ParamPoint:
        if not self.is_valid(p):
            raise DomainError(f"{p} is not a valid parameter point of {self.name}")
        return p

    def tail_map(self, p: ParamPoint, kind: str = "auto") -> TailMap:
        if self.tail is not None:
            tail = self.tail(p.theta_array, p.gamma)
        elif math.isfinite(self.upper):
            tail = TailMap("linear", p.gamma, upper=self.upper)
        else:
            tail = TailMap("rational", p.gamma)
        return tail if kind == "auto" else rescaled(tail, kind)


def _check_x(model: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    lo, hi = model.trunc_interval
    if np.any(np.isnan(x)) or np.any(x <= lo) or np.any(x >= hi):
        raise DomainError(f"x outside the interval ({lo}, {hi}) of {model.name}")
    return x


def log_density(model: ModelSpec, x, p: ParamPoint):
    """log p(x; theta, gamma); -inf below gamma, right-limit value at x = gamma."""
    model.check(p)
    x = _check_x(model, x)
    theta = p.theta_array
    value = np.asarray(model.log_q(x, theta), dtype=float) - psi_value(model, p)
    out = np.where(x >= p.gamma, value, -np.inf)
    return float(out) if out.ndim == 0 else out


def _log_integral_q(model: ModelSpec, theta: np.ndarray, gamma: float, cfg) -> float:
    tail = model.tail_map(ParamPoint.of(theta, gamma))
    probe, _ = tail.transform(np.linspace(0.0, 0.99, 34))
    probe = probe[np.isfinite(probe)]
    shift = float(np.max(model.log_q(probe, theta)))
    if not math.isfinite(shift):
        raise NormalizationError(f"log q is not finite on the support of {model.name}")
    result = integrate_support(lambda x: np.exp(model.log_q(x, theta) - shift), tail, cfg)
    if not (math.isfinite(result.value) and result.value > 0):
        raise NormalizationError(
            f"normalizer of {model.name} is not finite at theta={theta}, gamma={gamma}"
        )
    return shift + math.log(result.value)


def psi_value(model: ModelSpec, p: ParamPoint, cfg: Optional[QuadratureConfig] = None) -> float:
    """psi(theta, gamma), from the closed form or as log of the integral of q."""
    model.check(p)
    if model.psi is not None:
        value = float(model.psi(p.theta_array, p.gamma))
        if not math.isfinite(value):
            raise NormalizationError(f"psi is not finite at {p}")
        return value
    return _log_integral_q(model, p.theta_array, p.gamma, cfg or PSI_QUADRATURE)


def _psi_function(model: ModelSpec, cfg=None) -> Callable[[np.ndarray], float]:
    def psi_at(vector):
        point = ParamPoint.from_vector(vector)
        if model.psi is not None:
            return float(model.psi(point.theta_array, point.gamma))
        return _log_integral_q(model, point.theta_array, point.gamma, cfg or PSI_QUADRATURE)

    return psi_at


def _cumulant_partial(model: ModelSpec, p: ParamPoint, index: tuple[int, ...]) -> float:
    """theta-only partial of psi on an oTEF as a cumulant of F(X)."""
    theta = p.theta_array
    log_psi = psi_value(model, p)
    tail = model.tail_map(p)

    def density(x):
        return np.exp(model.log_q(x, theta) - log_psi)

    mean = integrate_support(
        lambda x: model.otef.evaluate(x) * density(x)[:, None], tail, PSI_QUADRATURE
    ).value
    if len(index) == 1:
        return float(mean[index[0]])

    def centered_product(x):
        centered = model.otef.evaluate(x) - mean
        product = np.ones_like(x)
        for i in index:
            product = product * centered[:, i]
        return product * density(x)

    central = float(integrate_support(centered_product, tail, PSI_QUADRATURE).value)
    if len(index) < 4:
        return central
    # fourth cumulant: central moment minus the three pairings of covariances
    i, j, k, m = index

    def cov(a, b):
        return _cumulant_partial(model, p, (a, b))

    return central - (cov(i, j) * cov(k, m) + cov(i, k) * cov(j, m) + cov(i, m) * cov(j, k))


def psi_partial(
    model: ModelSpec,
    p: ParamPoint,
    index: Sequence[int],
    cfg: Optional[QuadratureConfig] = None,
) -> float:
    """Mixed partial of psi over the coordinates in ``index`` (d means gamma)."""
    index = tuple(sorted(int(i) for i in index))
    if len(index) > MAX_DERIVATIVE_ORDER:
        raise ValueError(f"derivative order {len(index)} above {MAX_DERIVATIVE_ORDER}")
    if not index:
        return psi_value(model, p, cfg)
    if model.psi_partial is not None:
        return float(model.psi_partial(p.theta_array, p.gamma, index))
    if model.psi is None and model.is_otef:
        if model.d not in index:
            return _cumulant_partial(model, p, index)
        # d psi / d gamma = -p(gamma), the rest by differences of that
        rest = list(index)
        rest.remove(model.d)

        def boundary_density(vector):
            point = ParamPoint.from_vector(vector)
            return -math.exp(
                float(model.log_q(np.array(point.gamma), point.theta_array))
                - psi_value(model, point)
            )

        return float(numdiff.partial(boundary_density, p.as_vector(), rest))
    return float(numdiff.partial(_psi_function(model, cfg), p.as_vector(), index))


def log_q_partial(model: ModelSpec, x, theta, index: Sequence[int]) -> np.ndarray:
    """Partial of log q(x; theta) over theta coordinates in ``index``."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    index = tuple(sorted(int(i) for i in index))
    if not index:
        return np.asarray(model.log_q(x, theta), dtype=float)
    if model.log_q_partial is not None:
        return np.asarray(model.log_q_partial(x, theta, index), dtype=float)
    if model.is_otef:
        if len(index) > 1:
            return np.zeros_like(x)
        return model.otef.evaluate(x)[..., index[0]]
    return np.asarray(
        numdiff.partial(lambda t: model.log_q(x, t), theta, index), dtype=float
    )


def log_p_partial(model: ModelSpec, x, p: ParamPoint, index: Sequence[int]) -> np.ndarray:
    """Mixed partial of log p at x >= gamma without the support check.

    At x = gamma this is the right-limit value.
    """
    index = tuple(sorted(int(i) for i in index))
    if model.d in index:
        regular = np.zeros_like(np.asarray(x, dtype=float))
    else:
        regular = log_q_partial(model, x, p.theta_array, index)
    return regular - psi_partial(model, p, index)


def multi_index(model: ModelSpec, theta_index: Sequence[int], s: int) -> tuple[int, ...]:
    theta_index = tuple(int(i) for i in theta_index)
    if any(not 0 <= i < model.d for i in theta_index):
        raise DomainError(f"theta index out of range for d={model.d}: {theta_index}")
    if s < 0:
        raise DomainError("gamma order must be non-negative")
    return theta_index + (model.d,) * s


def log_density_partial(
    model: ModelSpec,
    x: float,
    p: ParamPoint,
    theta_index: Sequence[int] = (),
    s: int = 0,
) -> float:
    """D_theta^{theta_index} (d/dgamma)^s log p at an interior point x > gamma."""
    model.check(p)
    x = _check_x(model, x)
    index = multi_index(model, theta_index, s)
    if len(index) > MAX_DERIVATIVE_ORDER:
        raise DomainError(f"r + s must not exceed {MAX_DERIVATIVE_ORDER}")
    if np.any(x <= p.gamma):
        raise DomainError("log p is not differentiable at or below gamma")
    return float(log_p_partial(model, x, p, index))


def _tabulated_sampler(model: ModelSpec, p: ParamPoint, u: np.ndarray) -> np.ndarray:
    """Inverse CDF read off a fine table on the pulled-back support."""
    tail = model.tail_map(p)
    grid = np.linspace(0.0, 1.0, 8193)[:-1]
    x, jac = tail.transform(grid)
    dens = np.exp(model.log_q(x, p.theta_array) - psi_value(model, p)) * jac
    cdf = sp_integrate.cumulative_trapezoid(dens, grid, initial=0.0)
    cdf = cdf / cdf[-1]
    return np.interp(u, cdf, x)


def draw_sample(model: ModelSpec, p: ParamPoint, n: int, seed: int) -> Sample:
    model.check(p)
    if n < 1:
        raise DomainError("n must be at least 1")
    rng = np.random.default_rng(seed)
    u = rng.random(int(n))
    if model.sampler is not None:
        values = model.sampler(p.theta_array, p.gamma, u)
    else:
        values = _tabulated_sampler(model, p, u)
    # draws that round onto the boundary stay in the support
    return Sample.from_values(np.maximum(values, p.gamma))


def log_q_sums(model: ModelSpec, values: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """sum_j log q(x_j; theta) for each row of ``thetas``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    return np.asarray(model.log_q(values[:, None], thetas[None, :, :]), dtype=float).sum(
        axis=0
    )


# --- truncated exponential -------------------------------------------------


def _exp_psi(theta, gamma):
    rate = theta[..., 0]
    return -rate * gamma - np.log(rate)


def _exp_psi_partial(theta, gamma, index):
    rate = float(theta[0])
    a = sum(1 for i in index if i == 0)
    b = len(index) - a
    if b == 0:
        if a == 0:
            return -rate * gamma - math.log(rate)
        value = (-1) ** a * math.factorial(a - 1) / rate**a
        return value - gamma if a == 1 else value
    if b == 1:
        return {0: -rate, 1: -1.0}.get(a, 0.0)
    return 0.0


def trunc_exp() -> ModelSpec:
    def log_q(x, theta):
        return -theta[..., 0] * x

    def log_q_partial_(x, theta, index):
        x = np.asarray(x, dtype=float)
        return -x if len(index) == 1 else np.zeros_like(x)

    def sampler(theta, gamma, u):
        return gamma - np.log1p(-u) / theta[0]

    def initial(values):
        spread = float(np.mean(values) - values[0])
        return np.array([1.0 / spread if spread > 0 else 1.0])

    return ModelSpec(
        name="trunc_exp",
        d=1,
        param_names=("theta",),
        theta_lower=(0.0,),
        log_q=log_q,
        psi=_exp_psi,
        psi_partial=_exp_psi_partial,
        log_q_partial=log_q_partial_,
        otef=ExponentialPart(
            statistics=lambda x: -np.asarray(x, dtype=float)[..., None],
            base=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        ),
        eta=lambda theta, gamma: np.array([1.0 / theta[0] + gamma]),
        eta_domain=lambda eta, gamma: bool(eta[0] > gamma),
        sampler=sampler,
        tail=lambda theta, gamma: TailMap("exponential", gamma, scale=1.0 / theta[0]),
        initial_theta=initial,
        start=(1.0,),
        description="density theta exp(-theta (x - gamma)) on [gamma, inf)",
    )


# --- truncated normal, natural parameters ------------------------------------


def _natural_nu(alpha, beta, gamma):
    root = np.sqrt(-2.0 * beta)
    return gamma * root - alpha / root


def _scaled_power_partial(beta: float, power: float, m: int) -> float:
    """d^m/dbeta^m of (-2 beta)**power."""
    coef = 1.0
    for j in range(m):
        coef *= -2.0 * (power - j)
    return coef * (-2.0 * beta) ** (power - m)


def _natural_nu_partial(alpha, beta, gamma, index):
    a = index.count(0)
    m = index.count(1)
    c = index.count(2)
    if a + c > 1:
        return 0.0
    if a == 1:
        return -_scaled_power_partial(beta, -0.5, m)
    if c == 1:
        return _scaled_power_partial(beta, 0.5, m)
    return gamma * _scaled_power_partial(beta, 0.5, m) - alpha * _scaled_power_partial(
        beta, -0.5, m
    )


def _natural_poly_partial(alpha, beta, index):
    """Partials of -log(-beta)/2 - alpha**2/(4 beta) over (alpha, beta)."""
    a = index.count(0)
    m = index.count(1)
    value = 0.0
    if a == 0 and m >= 1:
        value += -0.5 * (-1) ** (m - 1) * math.factorial(m - 1) / beta**m
    if a == 0 and m == 0:
        value += -0.5 * math.log(-beta)
    alpha_part = {0: alpha * alpha, 1: 2.0 * alpha, 2: 2.0}.get(a, 0.0)
    value += -0.25 * alpha_part * (-1) ** m * math.factorial(m) * beta ** (-1 - m)
    return value


def _natural_psi(theta, gamma):
    alpha, beta = theta[..., 0], theta[..., 1]
    return (
        -0.5 * np.log(-beta)
        - alpha**2 / (4.0 * beta)
        + special.log_ndtr(-_natural_nu(alpha, beta, gamma))
    )


def _natural_psi_partial(theta, gamma, index):
    alpha, beta = float(theta[0]), float(theta[1])
    nu = float(_natural_nu(alpha, beta, gamma))
    outer = log_upper_tail_derivatives(nu, len(index))
    tail_part = compose_partial(
        [float(v) for v in outer],
        lambda idx: _natural_nu_partial(alpha, beta, gamma, list(idx)),
        tuple(index),
    )
    if 2 in index:
        return float(tail_part)
    return float(tail_part) + _natural_poly_partial(alpha, beta, list(index))


def _normal_tail_sampler(center, scale, gamma, u):
    nu = (gamma - center) / scale
    z = special.ndtri_exp(np.log1p(-u) + special.log_ndtr(-nu))
    return center - scale * z


_HALF_LOG_PI = 0.5 * math.log(math.pi)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def trunc_normal_natural() -> ModelSpec:
    def log_q(x, theta):
        return theta[..., 0] * x + theta[..., 1] * x * x - _HALF_LOG_PI

    def log_q_partial_(x, theta, index):
        x = np.asarray(x, dtype=float)
        if len(index) > 1:
            return np.zeros_like(x)
        return x if index[0] == 0 else x * x

    def moments(theta):
        alpha, beta = theta[0], theta[1]
        return -alpha / (2.0 * beta), 1.0 / math.sqrt(-2.0 * beta)

    def sampler(theta, gamma, u):
        center, scale = moments(theta)
        return _normal_tail_sampler(center, scale, gamma, u)

    def tail(theta, gamma):
        center, scale = moments(theta)
        return TailMap("probit", gamma, scale=scale, center=center)

    def initial(values):
        var = float(np.var(values)) or 1.0
        return np.array([float(np.mean(values)) / var, -0.5 / var])

    return ModelSpec(
        name="trunc_normal_natural",
        d=2,
        param_names=("alpha", "beta"),
        theta_lower=(-math.inf, -math.inf),
        theta_upper=(math.inf, 0.0),
        log_q=log_q,
        psi=_natural_psi,
        psi_partial=_natural_psi_partial,
        log_q_partial=log_q_partial_,
        otef=ExponentialPart(
            statistics=lambda x: np.stack(
                [np.asarray(x, dtype=float), np.asarray(x, dtype=float) ** 2], axis=-1
            ),
            base=lambda x: np.full_like(np.asarray(x, dtype=float), -_HALF_LOG_PI),
        ),
        sampler=sampler,
        tail=tail,
        initial_theta=initial,
        start=(0.0, -0.5),
        description="exp(alpha x + beta x^2) / sqrt(pi) truncated to [gamma, inf)",
    )


# --- truncated normal, mean and standard deviation ---------------------------


def trunc_normal_meansd() -> ModelSpec:
    def log_q(x, theta):
        mu, sigma = theta[..., 0], theta[..., 1]
        return -_HALF_LOG_2PI - np.log(sigma) - (x - mu) ** 2 / (2.0 * sigma**2)

    def psi(theta, gamma):
        mu, sigma = theta[..., 0], theta[..., 1]
        return special.log_ndtr(-(gamma - mu) / sigma)

    def initial(values):
        return np.array([float(np.mean(values)), float(np.std(values)) or 1.0])

    return ModelSpec(
        name="trunc_normal_meansd",
        d=2,
        param_names=("mu", "sigma"),
        theta_lower=(-math.inf, 0.0),
        log_q=log_q,
        psi=psi,
        sampler=lambda theta, gamma, u: _normal_tail_sampler(theta[0], theta[1], gamma, u),
        tail=lambda theta, gamma: TailMap(
            "probit", gamma, scale=float(theta[1]), center=float(theta[0])
        ),
        initial_theta=initial,
        start=(0.0, 1.0),
        description="N(mu, sigma^2) truncated to [gamma, inf); not an oTEF",
    )


# --- truncated normal with unit scale ---------------------------------------


def _unit_psi_partial(theta, gamma, index):
    alpha = float(theta[0])
    nu = gamma - alpha
    outer = [float(v) for v in log_upper_tail_derivatives(nu, len(index))]
    tail_part = compose_partial(
        outer, lambda idx: (-1.0 if idx == (0,) else 1.0) if len(idx) == 1 else 0.0, index
    )
    a = index.count(0)
    if 1 in index:
        return float(tail_part)
    return float(tail_part) + {0: 0.5 * alpha * alpha, 1: alpha, 2: 1.0}.get(a, 0.0)


def trunc_normal_unit() -> ModelSpec:
    def log_q(x, theta):
        return theta[..., 0] * x - 0.5 * x * x - _HALF_LOG_2PI

    def psi(theta, gamma):
        alpha = theta[..., 0]
        return 0.5 * alpha**2 + special.log_ndtr(-(gamma - alpha))

    return ModelSpec(
        name="trunc_normal_unit",
        d=1,
        param_names=("alpha",),
        log_q=log_q,
        psi=psi,
        psi_partial=_unit_psi_partial,
        log_q_partial=lambda x, theta, index: (
            np.asarray(x, dtype=float) if len(index) == 1 else np.zeros_like(x)
        ),
        otef=ExponentialPart(
            statistics=lambda x: np.asarray(x, dtype=float)[..., None],
            base=lambda x: -0.5 * np.asarray(x, dtype=float) ** 2 - _HALF_LOG_2PI,
        ),
        sampler=lambda theta, gamma, u: _normal_tail_sampler(theta[0], 1.0, gamma, u),
        tail=lambda theta, gamma: TailMap("probit", gamma, scale=1.0, center=float(theta[0])),
        initial_theta=lambda values: np.array([float(np.mean(values))]),
        start=(0.0,),
        description="N(alpha, 1) truncated to [gamma, inf)",
    )


# --- generic oTEF -----------------------------------------------------------


def make_otef(
    name: str,
    statistics: Callable[[np.ndarray], np.ndarray],
    base: Callable[[np.ndarray], np.ndarray],
    d: int,
    theta_lower: Sequence[float] = (),
    theta_upper: Sequence[float] = (),
    psi: Optional[Callable] = None,
    upper: float = math.inf,
    tail_scale: float = 1.0,
    start: Sequence[float] = (),
    param_names: Sequence[str] = (),
    source: str = "",
) -> ModelSpec:
    """Build an oTEF from its statistics F and carrier M.

    Without a closed-form psi the normalizer is computed by quadrature and
    its theta-partials as cumulants of F(X).
    """
    part = ExponentialPart(statistics=statistics, base=base)

    def log_q(x, theta):
        x = np.asarray(x, dtype=float)
        stats = np.asarray(statistics(x), dtype=float).reshape(x.shape + (d,))
        return np.sum(theta * stats, axis=-1) + base(x)

    def tail(theta, gamma):
        if math.isfinite(upper):
            return TailMap("linear", gamma, upper=upper)
        return TailMap("rational", gamma, scale=tail_scale)

    return ModelSpec(
        name=name,
        d=d,
        param_names=tuple(param_names),
        theta_lower=tuple(theta_lower),
        theta_upper=tuple(theta_upper),
        trunc_interval=(-math.inf, upper),
        log_q=log_q,
        psi=psi,
        otef=part,
        tail=tail,
        start=tuple(start),
        description="user-defined oTEF",
        source=source,
    )


MODELS: dict[str, Callable[[], ModelSpec]] = {
    "trunc_exp": trunc_exp,
    "trunc_normal_natural": trunc_normal_natural,
    "trunc_normal_meansd": trunc_normal_meansd,
    "trunc_normal_unit": trunc_normal_unit,
}

_custom_models: dict[str, ModelSpec] = {}


def register_model(model: ModelSpec) -> None:
    if model.name in MODELS:
        raise ValueError(f"{model.name} would shadow a built-in model")
    _custom_models[model.name] = model


def get_model(name: str) -> ModelSpec:
    if name in _custom_models:
        return _custom_models[name]
    if name in MODELS:
        return MODELS[name]()
    raise UnsupportedModelError(
        f"unknown model {name!r}; choose from {sorted([*MODELS, *_custom_models])}"
    )


def require_otef(model: ModelSpec, operation: str) -> ExponentialPart:
    if model.otef is None:
        raise UnsupportedModelError(f"{operation} needs an oTEF, {model.name} is not one")
    return model.otef
