"""Information geometry of a one-sided truncated family.

The metric is block diagonal: g_theta = -A^(2,0) on the regular block,
g_gammagamma = (d psi / d gamma)**2, and no mixed components. Christoffel
symbols of the first kind are stored as gamma_christoffel[a, b, c] = Gamma_{ab,c}
with the truncation parameter as the last coordinate.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

import numpy as np

from truncgeo import numdiff
from truncgeo.exceptions import (
    DomainError,
    GeometryError,
    InversionError,
    StreamlineError,
    TruncGeoError,
)
from truncgeo.expectations import a_tensor, score_products
from truncgeo.export import metadata, write_csv, write_json
from truncgeo.models import ModelSpec, ParamPoint, psi_partial, require_otef
from truncgeo.quadrature import QuadratureConfig

if TYPE_CHECKING:
    from truncgeo.priors import PriorSpec

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.0, 1.0)
DEFAULT_STEP = 1e-3


@dataclass(frozen=True, eq=False)
class GeometryAt:
    point: ParamPoint
    g_theta: np.ndarray
    g_gammagamma: float
    g_theta_inv: np.ndarray
    gamma_christoffel: np.ndarray
    alpha_christoffel: dict
    a11: np.ndarray
    a21: np.ndarray
    a30: np.ndarray
    a02: float
    c: float
    skewness: np.ndarray = field(repr=False)

    @property
    def d(self) -> int:
        return self.point.d

    @property
    def metric(self) -> np.ndarray:
        """The full (d+1) x (d+1) metric."""
        full = np.zeros((self.d + 1, self.d + 1))
        full[: self.d, : self.d] = self.g_theta
        full[self.d, self.d] = self.g_gammagamma
        return full

    def to_dict(self) -> dict:
        return {
            "point": self.point.to_dict(),
            "g_theta": self.g_theta.tolist(),
            "g_gammagamma": self.g_gammagamma,
            "g_theta_inv": self.g_theta_inv.tolist(),
            "gamma_christoffel": self.gamma_christoffel.tolist(),
            "alpha_christoffel": {
                repr(float(alpha)): values.tolist()
                for alpha, values in self.alpha_christoffel.items()
            },
            "a11": self.a11.tolist(),
            "a21": self.a21.tolist(),
            "a30": self.a30.tolist(),
            "a02": self.a02,
            "c": self.c,
        }


@dataclass(frozen=True)
class TangentVector:
    d_theta: np.ndarray
    d_gamma: float

    def as_vector(self) -> np.ndarray:
        return np.append(self.d_theta, self.d_gamma)


def metric_blocks(
    model: ModelSpec,
    p: ParamPoint,
    cfg: Optional[QuadratureConfig] = None,
) -> tuple[np.ndarray, float]:
    """(g_theta, g_gammagamma); g_theta must be positive definite."""
    g_theta = -a_tensor(model, p, 2, 0, cfg, shortcut=True).tensor
    g_theta = 0.5 * (g_theta + g_theta.T)
    try:
        np.linalg.cholesky(g_theta)
    except np.linalg.LinAlgError as exc:
        raise GeometryError(f"g_theta is not positive definite at {p}") from exc
    g_gg = psi_partial(model, p, (model.d,)) ** 2
    if not g_gg > 0:
        raise GeometryError(f"g_gammagamma vanishes at {p}")
    return g_theta, float(g_gg)


def full_metric(model: ModelSpec, p: ParamPoint, cfg=None) -> np.ndarray:
    g_theta, g_gg = metric_blocks(model, p, cfg)
    full = np.zeros((model.d + 1, model.d + 1))
    full[: model.d, : model.d] = g_theta
    full[model.d, model.d] = g_gg
    return full


def levi_civita(model: ModelSpec, p: ParamPoint, cfg=None) -> np.ndarray:
    """Gamma^g_{ab,c} from central differences of the metric."""
    dg = numdiff.gradient(
        lambda v: full_metric(model, ParamPoint.from_vector(v), cfg), p.as_vector()
    )
    return 0.5 * (dg + dg.transpose(1, 0, 2) - dg.transpose(1, 2, 0))


def alpha_christoffel_from_definition(
    model: ModelSpec, p: ParamPoint, alpha: float, cfg=None
) -> np.ndarray:
    """alpha E[(d_i d_j l)(d_k l)] + (1 - alpha) Gamma^g_{ij,k} on the regular block."""
    _, mixed = score_products(model, p, cfg)
    regular = levi_civita(model, p, cfg)[: model.d, : model.d, : model.d]
    return alpha * mixed + (1.0 - alpha) * regular


def geometry_at(
    model: ModelSpec,
    p: ParamPoint,
    alphas: Iterable[float] = DEFAULT_ALPHAS,
    cfg: Optional[QuadratureConfig] = None,
) -> GeometryAt:
    model.check(p)
    d = model.d
    g_theta, g_gg = metric_blocks(model, p, cfg)
    christoffel = levi_civita(model, p, cfg)
    skewness, _ = score_products(model, p, cfg)
    regular = christoffel[:d, :d, :d]
    alpha_christoffel = {float(a): regular - 0.5 * float(a) * skewness for a in alphas}
    return GeometryAt(
        point=p,
        g_theta=g_theta,
        g_gammagamma=g_gg,
        g_theta_inv=np.linalg.inv(g_theta),
        gamma_christoffel=christoffel,
        alpha_christoffel=alpha_christoffel,
        a11=a_tensor(model, p, 1, 1, cfg, shortcut=True).data,
        a21=a_tensor(model, p, 2, 1, cfg, shortcut=True).data,
        a30=a_tensor(model, p, 3, 0, cfg, shortcut=True).data,
        a02=float(a_tensor(model, p, 0, 2, cfg, shortcut=True)),
        c=float(a_tensor(model, p, 0, 1, cfg, shortcut=True)),
        skewness=skewness,
    )


def chi_vector(model: ModelSpec, p: ParamPoint, cfg=None) -> TangentVector:
    """chi = d/dgamma + A^(1,1)_i g^{ij} d/dtheta_j."""
    model.check(p)
    g_theta, _ = metric_blocks(model, p, cfg)
    a11 = a_tensor(model, p, 1, 1, cfg, shortcut=True).data
    return TangentVector(np.linalg.solve(g_theta, a11), 1.0)


def log_extended_volume(model: ModelSpec, p: ParamPoint, rho: float, tau: float, cfg=None) -> float:
    g_theta, g_gg = metric_blocks(model, p, cfg)
    _, log_det = np.linalg.slogdet(g_theta)
    return (rho + 0.5) * log_det + (tau + 0.5) * math.log(g_gg)


def extended_volume(model: ModelSpec, p: ParamPoint, rho: float, tau: float, cfg=None) -> float:
    """e_{rho,tau} = (det g_theta)^(rho + 1/2) (g_gammagamma)^(tau + 1/2)."""
    return math.exp(log_extended_volume(model, p, rho, tau, cfg))


class LieCondition(enum.Enum):
    PM_GAMMA_LIE = "pm_gamma_lie"
    MM_GAMMA_LIE = "mm_gamma_lie"

    @property
    def volume_exponents(self) -> tuple[float, float]:
        """Powers of (det g_theta, g_gammagamma) subtracted from log pi."""
        return (1.0, 0.5) if self is LieCondition.PM_GAMMA_LIE else (0.5, 1.0)


def volume_gradient(model: ModelSpec, p: ParamPoint, weights: tuple[float, float], cfg=None):
    """Gradient of a log det g_theta + b log g_gammagamma over (theta, gamma)."""
    a, b = weights

    def log_volume(vector):
        g_theta, g_gg = metric_blocks(model, ParamPoint.from_vector(vector), cfg)
        return a * np.linalg.slogdet(g_theta)[1] + b * math.log(g_gg)

    return numdiff.gradient(log_volume, p.as_vector())


def lie_residual(
    model: ModelSpec,
    p: ParamPoint,
    prior: "PriorSpec",
    kind: LieCondition | str,
    cfg=None,
) -> float:
    """L_chi of log pi minus the volume term of the condition."""
    require_otef(model, "the Lie form of the matching conditions")
    kind = LieCondition(kind) if isinstance(kind, str) else kind
    model.check(p)
    chi = chi_vector(model, p, cfg).as_vector()
    grad_theta, grad_gamma = prior.gradient(p)
    prior_grad = np.append(grad_theta, grad_gamma)
    return float(chi @ (prior_grad - volume_gradient(model, p, kind.volume_exponents, cfg)))


def eta_forward(model: ModelSpec, p: ParamPoint, cfg=None) -> np.ndarray:
    """Expectation parameters: closed form if the model has one, else D_theta psi = E[F]."""
    require_otef(model, "expectation parameters")
    model.check(p)
    if model.eta is not None:
        return np.asarray(model.eta(p.theta_array, p.gamma), dtype=float)
    return np.array([psi_partial(model, p, (i,), cfg) for i in range(model.d)])


def eta_inverse(
    model: ModelSpec,
    eta: Sequence[float],
    gamma: float,
    start: Optional[Sequence[float]] = None,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> ParamPoint:
    """Solve eta_forward(theta, gamma) = eta by damped Newton."""
    require_otef(model, "eta inversion")
    target = np.asarray(eta, dtype=float).ravel()
    if target.shape != (model.d,):
        raise InversionError(f"eta must have {model.d} components")
    if model.eta_domain is not None and not model.eta_domain(target, gamma):
        raise InversionError(f"(eta={target.tolist()}, gamma={gamma}) is outside the image of the model")
    theta = np.asarray(start if start is not None else model.start, dtype=float)
    if not model.is_valid(ParamPoint.of(theta, gamma)):
        raise InversionError(f"starting point {theta.tolist()} is not valid")

    def residual(t):
        return eta_forward(model, ParamPoint.of(t, gamma)) - target

    current = residual(theta)
    merit = float(current @ current)
    scale = max(1.0, float(np.linalg.norm(target)))
    for iteration in range(max_iter):
        if math.sqrt(merit) <= tol * scale:
            logger.debug(f"eta inversion converged after {iteration} iterations")
            return ParamPoint.of(theta, gamma)
        jacobian = numdiff.gradient(residual, theta).T
        try:
            direction = -np.linalg.solve(jacobian.reshape(model.d, model.d), current)
        except np.linalg.LinAlgError as exc:
            raise InversionError(f"singular Jacobian at theta={theta.tolist()}") from exc
        step = 1.0
        for _ in range(60):
            trial = theta + step * direction
            if model.is_valid(ParamPoint.of(trial, gamma)):
                trial_res = residual(trial)
                trial_merit = float(trial_res @ trial_res)
                if trial_merit < merit:
                    break
            step *= 0.5
        else:
            raise InversionError(f"no descent step from theta={theta.tolist()}")
        theta, current, merit = trial, trial_res, trial_merit
    if math.sqrt(merit) <= tol * scale:
        return ParamPoint.of(theta, gamma)
    raise InversionError(f"eta inversion did not converge in {max_iter} iterations")


@dataclass(frozen=True, eq=False)
class Streamline:
    """Nodes (s, point) of an integral curve of chi, with eta recorded at each."""

    s: np.ndarray
    points: tuple[ParamPoint, ...]
    eta_values: np.ndarray
    status: str = "complete"

    def __len__(self) -> int:
        return len(self.points)

    @property
    def final(self) -> ParamPoint:
        return self.points[-1]

    def eta_drift(self) -> float:
        return float(np.max(np.abs(self.eta_values - self.eta_values[0])))


def _chi_field(model: ModelSpec, cfg):
    def field_at(y):
        point = ParamPoint.from_vector(y)
        if not model.is_valid(point):
            raise DomainError(f"{point} left the parameter space")
        return chi_vector(model, point, cfg).as_vector()

    return field_at


def _rk4_step(y: np.ndarray, h: float, f) -> np.ndarray:
    k1 = h * f(y)
    k2 = h * f(y + 0.5 * k1)
    k3 = h * f(y + 0.5 * k2)
    k4 = h * f(y + k3)
    return y + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


def trace_streamline(
    model: ModelSpec,
    start: ParamPoint,
    s_max: float,
    step: float = DEFAULT_STEP,
    cfg=None,
) -> Streamline:
    """Integrate d(theta, gamma)/ds = chi with classical RK4 at a fixed step.

    Stops early with status "exited_domain" when a stage leaves the
    parameter space; the last step is shortened to land on s_max.
    """
    require_otef(model, "streamline tracing")
    if not step > 0:
        raise StreamlineError(f"step must be positive, got {step}")
    if s_max < 0:
        raise StreamlineError(f"s_max must be non-negative, got {s_max}")
    model.check(start)
    f = _chi_field(model, cfg)
    y = start.as_vector()
    s_values = [0.0]
    points = [start]
    etas = [eta_forward(model, start, cfg)]
    status = "complete"
    n_steps = int(math.ceil(s_max / step - 1e-9)) if s_max > 0 else 0
    for k in range(n_steps):
        s = s_values[-1]
        h = min(step, s_max - s)
        try:
            y_next = _rk4_step(y, h, f)
            point = ParamPoint.from_vector(y_next)
            model.check(point)
            eta = eta_forward(model, point, cfg)
        except TruncGeoError as exc:
            if k == 0:
                raise StreamlineError(f"streamline left the domain immediately: {exc}") from exc
            logger.info(f"streamline stopped at s={s:.6g}: {exc}")
            status = "exited_domain"
            break
        y = y_next
        s_values.append(s + h if k < n_steps - 1 else float(s_max))
        points.append(point)
        etas.append(eta)
    return Streamline(np.array(s_values), tuple(points), np.array(etas), status)


def streamline_rows(line: Streamline, model: ModelSpec) -> tuple[list[str], list[list]]:
    d = model.d
    header = (
        ["s"]
        + [f"theta_{i + 1}" for i in range(d)]
        + ["gamma"]
        + [f"eta_{i + 1}" for i in range(d)]
        + ["status"]
    )
    rows = []
    for s, point, eta in zip(line.s, line.points, line.eta_values):
        rows.append([float(s), *point.theta, point.gamma, *map(float, eta), line.status])
    return header, rows


def write_streamline_csv(
    line: Streamline, model: ModelSpec, path: str | Path, config: Optional[dict] = None
) -> Path:
    """Columns s, theta_1..theta_d, gamma, eta_1..eta_d, status."""
    header, rows = streamline_rows(line, model)
    return write_csv(path, header, rows, metadata(config))


def write_geometry_json(geo: GeometryAt, path: str | Path, config: Optional[dict] = None) -> Path:
    return write_json({"metadata": metadata(config), "geometry": geo.to_dict()}, path)
