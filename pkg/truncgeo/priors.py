"""Priors over (theta, gamma) and the matching-condition residuals.

Every residual is LHS - RHS of its condition, so it vanishes exactly when
the prior satisfies the condition at the point. Derivatives of the
coefficients (c, A^(1,1), g^{-1}, det g_theta) come from central differences.
"""

from __future__ import annotations

import enum
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from truncgeo import numdiff
from truncgeo.exceptions import ConfigError, DomainError, GeometryError
from truncgeo.expectations import a_tensor, c_value
from truncgeo.export import metadata, write_csv
from truncgeo.expression import compile_expression, theta_names
from truncgeo.geometry import (
    LieCondition,
    chi_vector,
    eta_inverse,
    geometry_at,
    levi_civita,
    lie_residual,
    log_extended_volume,
    metric_blocks,
    volume_gradient,
)
from truncgeo.models import ModelSpec, ParamPoint, require_otef

logger = logging.getLogger(__name__)

FORM_TOLERANCE = 1e-6
C_CHECK_TOLERANCE = 1e-6


@dataclass(frozen=True)
class PriorTag:
    kind: str
    params: tuple[float, ...] = ()
    name: str = ""
    text: str = ""

    KINDS = ("alpha_parallel", "extended_volume", "jeffreys", "custom")

    def __str__(self) -> str:
        if self.kind == "custom":
            return f"custom({self.name})"
        if self.params:
            return f"{self.kind}({','.join(f'{v:g}' for v in self.params)})"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "PriorTag":
        """Read 'jeffreys', 'alpha_parallel(-1)' or 'extended_volume(0.5, 0)'."""
        match = re.fullmatch(r"\s*(\w+)\s*(?:\(([^)]*)\))?\s*", text)
        if not match or match.group(1) not in ("alpha_parallel", "extended_volume", "jeffreys"):
            raise ConfigError(f"not a built-in prior tag: {text!r}")
        kind = match.group(1)
        try:
            params = tuple(float(v) for v in (match.group(2) or "").split(",") if v.strip())
        except ValueError as exc:
            raise ConfigError(f"bad parameters in prior tag {text!r}") from exc
        expected = {"alpha_parallel": 1, "extended_volume": 2, "jeffreys": 0}[kind]
        if len(params) != expected:
            raise ConfigError(f"{kind} takes {expected} parameter(s), got {len(params)}")
        return cls(kind, params)


def _pointwise(fn: Callable[[ParamPoint], float]):
    """Lift a scalar function of a point to broadcast arrays of theta and gamma."""

    def evaluate(theta, gamma):
        theta = np.asarray(theta, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        shape = np.broadcast_shapes(theta.shape[:-1], gamma.shape)
        thetas = np.broadcast_to(theta, shape + theta.shape[-1:]).reshape(-1, theta.shape[-1])
        gammas = np.broadcast_to(gamma, shape).ravel()
        out = [fn(ParamPoint.of(t, g)) for t, g in zip(thetas, gammas)]
        return np.array(out).reshape(shape)

    return evaluate


@dataclass(frozen=True)
class PriorSpec:
    """A prior density through its logarithm.

    ``log_pi`` broadcasts like the model functions: theta on its last axis.
    ``grad_log_pi`` is optional; without it the gradient comes from central
    differences of ``log_pi``.
    """

    log_pi: Callable
    tag: PriorTag
    grad_log_pi: Optional[Callable] = None
    offset: float = field(default=0.0)

    def log_density(self, p: ParamPoint) -> float:
        value = float(self.log_pi(p.theta_array, p.gamma)) + self.offset
        if not math.isfinite(value):
            raise DomainError(f"prior {self.tag} is not finite at {p}")
        return value

    def log_density_grid(self, theta, gamma) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        shape = np.broadcast_shapes(theta.shape[:-1], gamma.shape)
        return np.broadcast_to(self.log_pi(theta, gamma), shape) + self.offset

    def gradient(self, p: ParamPoint) -> tuple[np.ndarray, float]:
        """(D_theta log pi, d log pi / d gamma)."""
        if self.grad_log_pi is not None:
            grad_theta, grad_gamma = self.grad_log_pi(p.theta_array, p.gamma)
            return np.asarray(grad_theta, dtype=float), float(grad_gamma)
        grad = numdiff.gradient(
            lambda v: float(self.log_pi(v[:-1], v[-1])), p.as_vector()
        )
        return grad[:-1], float(grad[-1])

    @property
    def definition(self) -> str:
        """The expression behind a custom prior, else the built-in tag."""
        return self.tag.text if self.tag.kind == "custom" else str(self.tag)

    def scaled(self, k: float) -> "PriorSpec":
        """The prior k * pi; every matching residual is unchanged."""
        if not k > 0:
            raise ValueError("scale must be positive")
        return PriorSpec(self.log_pi, self.tag, self.grad_log_pi, self.offset + math.log(k))


def builtin_prior(model: ModelSpec, tag: PriorTag | str, cfg=None) -> PriorSpec:
    """Jeffreys, extended-volume or alpha-parallel prior built from the geometry."""
    tag = PriorTag.parse(tag) if isinstance(tag, str) else tag
    if tag.kind == "jeffreys":
        rho, tau = 0.0, 0.0
    elif tag.kind == "extended_volume":
        rho, tau = tag.params
    elif tag.kind == "alpha_parallel":
        require_otef(model, "alpha-parallel priors")
        rho, tau = 0.0, 0.5 * tag.params[0]
    else:
        raise ConfigError(f"{tag} is not a built-in prior")

    def log_volume(p: ParamPoint) -> float:
        return log_extended_volume(model, p, rho, tau, cfg)

    return PriorSpec(_pointwise(log_volume), tag)


def custom_prior(text: str, model: ModelSpec, name: str = "") -> PriorSpec:
    """Prior density given as an expression in the regular parameters and gamma."""
    components = theta_names(model.d, model.param_names)
    expr = compile_expression(text, [*components, "gamma"])

    def log_pi(theta, gamma):
        theta = np.asarray(theta, dtype=float)
        env = {key: theta[..., i] for key, i in components.items()}
        env["gamma"] = np.asarray(gamma, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(expr(env))

    return PriorSpec(log_pi, PriorTag("custom", name=name or text, text=text))


def resolve_prior(model: ModelSpec, text: str, named: Optional[dict] = None, cfg=None) -> PriorSpec:
    """A named config prior, a built-in tag, or else an expression."""
    named = named or {}
    if text in named:
        return custom_prior(named[text], model, name=text)
    try:
        tag = PriorTag.parse(text)
    except ConfigError:
        return custom_prior(text, model)
    return builtin_prior(model, tag, cfg)


class ConditionKind(enum.Enum):
    PM_GAMMA = "pm_gamma"
    PM_THETA = "pm_theta"
    MM_GAMMA = "mm_gamma"
    MM_THETA = "mm_theta"


@dataclass(frozen=True)
class MatchingCondition:
    """A matching condition; ``component`` (0-based) picks theta_i for the theta kinds."""

    kind: ConditionKind
    component: Optional[int] = None

    def __post_init__(self):
        needs_component = self.kind in (ConditionKind.PM_THETA, ConditionKind.MM_THETA)
        if needs_component and self.component is None:
            object.__setattr__(self, "component", 0)
        if not needs_component and self.component is not None:
            raise ConfigError(f"{self.kind.value} takes no component")

    def __str__(self) -> str:
        if self.component is None:
            return self.kind.value
        return f"{self.kind.value}{self.component + 1}"

    @classmethod
    def parse(cls, text: str) -> "MatchingCondition":
        """'pm_gamma', 'mm_theta', 'pm_theta2' or 'pm_theta:2' (1-based)."""
        match = re.fullmatch(r"\s*(pm|mm)_(gamma|theta)(?:[:_]?(\d+))?\s*", text.lower())
        if not match:
            raise ConfigError(f"unknown matching condition {text!r}")
        kind = ConditionKind(f"{match.group(1)}_{match.group(2)}")
        component = int(match.group(3)) - 1 if match.group(3) else None
        if component is not None and component < 0:
            raise ConfigError("theta components are numbered from 1")
        return cls(kind, component)

    def validate(self, d: int) -> None:
        if self.component is not None and not 0 <= self.component < d:
            raise ConfigError(f"component {self.component + 1} outside 1..{d}")


@dataclass(frozen=True, eq=False)
class _Coefficients:
    """Coefficients of the conditions at one point and their first derivatives."""

    g_inv: np.ndarray
    a11: np.ndarray
    c: float
    d_log_c: np.ndarray  # over (theta..., gamma)
    d_log_det: np.ndarray
    d_a11: np.ndarray  # d_a11[i, j] = d_i A_j
    d_g_inv: np.ndarray  # d_g_inv[m, i, k] = d_m g^{ik}
    div_scaled: float  # sum_i d_i (g^{ij} A_j / c)


def _coefficients(model: ModelSpec, p: ParamPoint, cfg=None) -> _Coefficients:
    d = model.d

    def packed(vector):
        point = ParamPoint.from_vector(vector)
        g_theta, _ = metric_blocks(model, point, cfg)
        g_inv = np.linalg.inv(g_theta)
        a11 = a_tensor(model, point, 1, 1, cfg, shortcut=True).data
        c = c_value(model, point, cfg)
        return np.concatenate(
            [[math.log(c), np.linalg.slogdet(g_theta)[1]], a11, g_inv.ravel(), g_inv @ a11 / c]
        )

    here = packed(p.as_vector())
    jac = numdiff.gradient(packed, p.as_vector())
    g_inv = here[2 + d : 2 + d + d * d].reshape(d, d)
    block = slice(2 + d + d * d, 2 + 2 * d + d * d)
    return _Coefficients(
        g_inv=g_inv,
        a11=here[2 : 2 + d],
        c=math.exp(here[0]),
        d_log_c=jac[:, 0],
        d_log_det=jac[:, 1],
        d_a11=jac[:d, 2 : 2 + d],
        d_g_inv=jac[:d, 2 + d : 2 + d + d * d].reshape(d, d, d),
        div_scaled=float(np.trace(jac[:d, block])),
    )


def pm_gamma_rhs_forms(model: ModelSpec, p: ParamPoint, cfg=None) -> dict[str, float]:
    """Right-hand side of the PM_GAMMA condition computed three ways.

    ``contracted``: d_gamma log c - g^{ij} d_i A_j
        + v^j {d_j log c + d_j log det g_theta + g^{km}(Gamma_{mk,j} - Gamma_{kj,m})}
    ``divergence``: c {-d_gamma(1/c) - d_i(g^{ij} A_j / c)}
    ``printed_sign``: the contracted form with a minus in front of the
        Christoffel difference; it agrees with the others only when
        d_i g_{km} is totally symmetric (oTEF in natural coordinates).
    """
    d = model.d
    co = _coefficients(model, p, cfg)
    v = co.g_inv @ co.a11
    christoffel = levi_civita(model, p, cfg)[:d, :d, :d]
    # difference[j] = g^{km} (Gamma_{mk,j} - Gamma_{kj,m})
    difference = np.einsum("km,mkj->j", co.g_inv, christoffel) - np.einsum(
        "km,kjm->j", co.g_inv, christoffel
    )
    base = co.d_log_c[d] - float(np.sum(co.g_inv * co.d_a11))
    shared = v @ (co.d_log_c[:d] + co.d_log_det[:d])
    return {
        "contracted": base + shared + v @ difference,
        "printed_sign": base + shared - v @ difference,
        "divergence": co.d_log_c[d] - co.c * co.div_scaled,
    }


def c_derivative_discrepancy(model: ModelSpec, p: ParamPoint, cfg=None) -> float:
    """max |A^(0,2) - d_gamma c|, |A^(1,1)_i - d_i c|, relative to the scale of c."""
    grad_c = numdiff.gradient(lambda v: c_value(model, ParamPoint.from_vector(v), cfg), p.as_vector())
    a02 = float(a_tensor(model, p, 0, 2, cfg))
    a11 = a_tensor(model, p, 1, 1, cfg).data
    gaps = np.abs(np.append(a11 - grad_c[:-1], a02 - grad_c[-1]))
    return float(np.max(gaps) / max(1.0, abs(c_value(model, p, cfg))))


def _pm_gamma(model, p, prior, cfg) -> float:
    d = model.d
    grad_theta, grad_gamma = prior.gradient(p)
    g_theta, _ = metric_blocks(model, p, cfg)
    a11 = a_tensor(model, p, 1, 1, cfg, shortcut=True).data
    lhs = grad_gamma + a11 @ np.linalg.solve(g_theta, grad_theta)
    forms = pm_gamma_rhs_forms(model, p, cfg)
    rhs = forms["contracted"]
    scale = max(1.0, abs(rhs))
    if abs(rhs - forms["divergence"]) > FORM_TOLERANCE * scale:
        logger.warning(
            f"PM_GAMMA forms disagree at {p}: contracted {rhs:.10g}, "
            f"divergence {forms['divergence']:.10g}"
        )
    if d > 1 and abs(rhs - forms["printed_sign"]) > FORM_TOLERANCE * scale:
        logger.warning(
            f"PM_GAMMA Christoffel term changes sign between readings at {p}: "
            f"contracted {rhs:.10g}, printed sign {forms['printed_sign']:.10g}"
        )
    return float(lhs - rhs)


def _pm_theta(model, p, prior, component, cfg) -> float:
    i = component
    grad_theta, _ = prior.gradient(p)

    def weights(vector):
        g_theta, _ = metric_blocks(model, ParamPoint.from_vector(vector), cfg)
        row = np.linalg.inv(g_theta)[i]
        if not row[i] > 0:
            raise GeometryError(f"g^{{ii}} is not positive at {vector}")
        return row / math.sqrt(row[i])

    w = weights(p.as_vector())
    divergence = sum(
        float(numdiff.partial(lambda v, j=j: weights(v)[j], p.as_vector(), (j,)))
        for j in range(model.d)
    )
    return float(w @ grad_theta + divergence)


def _mm_gamma(model, p, prior, cfg) -> float:
    d = model.d
    gap = c_derivative_discrepancy(model, p, cfg)
    if gap > C_CHECK_TOLERANCE:
        logger.warning(f"A^(0,2), A^(1,1) disagree with derivatives of c by {gap:.3g} at {p}")
    grad_theta, grad_gamma = prior.gradient(p)
    co = _coefficients(model, p, cfg)
    a21 = a_tensor(model, p, 2, 1, cfg, shortcut=True).tensor
    a30 = a_tensor(model, p, 3, 0, cfg, shortcut=True).tensor
    v = co.g_inv @ co.a11
    inner = grad_theta - 2.0 * co.d_log_c[:d] + 0.5 * np.einsum("jkm,km->j", a30, co.g_inv)
    return float(
        grad_gamma
        + 0.5 * float(np.sum(a21 * co.g_inv))
        - 2.0 * co.d_log_c[d]
        + v @ inner
    )


def _mm_theta(model, p, prior, component, cfg) -> float:
    i = component
    grad_theta, _ = prior.gradient(p)
    jeffreys = builtin_prior(model, "jeffreys", cfg)
    grad_jeffreys, _ = jeffreys.gradient(p)
    geo = geometry_at(model, p, alphas=(1.0,), cfg=cfg)
    e_connection = geo.alpha_christoffel[1.0]
    return float(
        grad_theta[i]
        - grad_jeffreys[i]
        - 0.5 * np.einsum("jk,jk->", e_connection[:, :, i], geo.g_theta_inv)
    )


def matching_residual(
    model: ModelSpec,
    p: ParamPoint,
    prior: PriorSpec,
    cond: MatchingCondition | str,
    cfg=None,
) -> float:
    cond = MatchingCondition.parse(cond) if isinstance(cond, str) else cond
    cond.validate(model.d)
    model.check(p)
    if cond.kind is ConditionKind.PM_GAMMA:
        return _pm_gamma(model, p, prior, cfg)
    if cond.kind is ConditionKind.PM_THETA:
        return _pm_theta(model, p, prior, cond.component, cfg)
    if cond.kind is ConditionKind.MM_GAMMA:
        return _mm_gamma(model, p, prior, cfg)
    return _mm_theta(model, p, prior, cond.component, cfg)


def submodel_residual(
    model: ModelSpec,
    eta0,
    gamma: float,
    rho: float,
    tau: float,
    kind: LieCondition | str = LieCondition.PM_GAMMA_LIE,
    start=None,
    cfg=None,
) -> float:
    """Residual of gamma -> e_{rho,tau}(theta(eta0, gamma), gamma) on the fixed-eta submodel.

    The prior's derivative is taken in gamma through the eta inversion; the
    volume term is differentiated along chi at the same point. They agree
    when chi is the gamma coordinate field of (eta, gamma).
    """
    kind = LieCondition(kind) if isinstance(kind, str) else kind
    point = eta_inverse(model, eta0, gamma, start=start)

    def log_prior(g):
        inner = eta_inverse(model, eta0, float(g[0]), start=point.theta)
        return log_extended_volume(model, inner, rho, tau, cfg)

    prior_slope = float(numdiff.partial(log_prior, [gamma], (0,)))
    chi = chi_vector(model, point, cfg).as_vector()
    volume_slope = float(chi @ volume_gradient(model, point, kind.volume_exponents, cfg))
    return prior_slope - volume_slope


def residual_grid(
    model: ModelSpec,
    prior: PriorSpec,
    cond: str,
    points: Iterable[ParamPoint],
    cfg=None,
) -> tuple[list[str], list[list]]:
    """Residual of a matching condition, or of its Lie form ('pm_gamma_lie'), at each point."""
    if cond.strip().lower().endswith("_lie"):
        try:
            kind = LieCondition(cond.strip().lower())
        except ValueError as exc:
            raise ConfigError(f"unknown Lie condition {cond!r}") from exc

        def evaluate(p):
            return lie_residual(model, p, prior, kind, cfg)

    else:
        parsed = MatchingCondition.parse(cond)
        parsed.validate(model.d)

        def evaluate(p):
            return matching_residual(model, p, prior, parsed, cfg)

    header = [*(f"theta_{i + 1}" for i in range(model.d)), "gamma", "residual"]
    rows = [[*p.theta, p.gamma, evaluate(p)] for p in points]
    return header, rows


def write_residual_csv(header, rows, path: str | Path, config: Optional[dict] = None) -> Path:
    return write_csv(path, header, rows, metadata(config))
