"""Maximum likelihood fits and exact posteriors on a quadrature grid.

The posterior lives on a tensor product of composite Gauss-Legendre rules:
one axis per regular parameter, centred at the MLE, and one axis for gamma
ending at the sample minimum. Sub-level masses for the pivots are computed
by rebuilding the affected axis on the truncated range, so pivot CDFs are
quadratures rather than sums over a fixed lattice.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from truncgeo.exceptions import (
    ConfigError,
    DegenerateFitError,
    DomainError,
    PosteriorError,
)
from truncgeo.export import metadata, write_json
from truncgeo.models import (
    ModelSpec,
    ParamPoint,
    Sample,
    log_q_partial,
    log_q_sums,
    psi_partial,
    psi_value,
)
from truncgeo.priors import PriorSpec

logger = logging.getLogger(__name__)

MLE_TOLERANCE = 1e-8


@dataclass(frozen=True, eq=False)
class MleResult:
    theta_hat: np.ndarray
    gamma_hat: float
    c_hat: float
    g_theta_hat: np.ndarray
    n: int
    converged: bool
    iterations: int
    score_norm: float = 0.0

    @property
    def gamma_star(self) -> float:
        """Bias-adjusted estimate gamma_hat - 1 / (n c_hat)."""
        return self.gamma_hat - 1.0 / (self.n * self.c_hat)

    @property
    def point(self) -> ParamPoint:
        return ParamPoint.of(self.theta_hat, self.gamma_hat)

    @property
    def g_theta_inv(self) -> np.ndarray:
        return np.linalg.inv(self.g_theta_hat)

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat,
            "gamma_hat": self.gamma_hat,
            "gamma_star": self.gamma_star,
            "c_hat": self.c_hat,
            "g_theta_hat": self.g_theta_hat,
            "n": self.n,
            "converged": self.converged,
            "iterations": self.iterations,
            "score_norm": self.score_norm,
        }


def _score_and_hessian(model: ModelSpec, values: np.ndarray, theta: np.ndarray, gamma: float):
    d = model.d
    p = ParamPoint.of(theta, gamma)
    n = len(values)
    score = np.array(
        [
            float(np.sum(log_q_partial(model, values, theta, (i,))))
            - n * psi_partial(model, p, (i,))
            for i in range(d)
        ]
    )
    hessian = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            hessian[i, j] = hessian[j, i] = float(
                np.sum(log_q_partial(model, values, theta, (i, j)))
            ) - n * psi_partial(model, p, (i, j))
    return score, hessian


def _log_likelihood(model: ModelSpec, values: np.ndarray, theta: np.ndarray, gamma: float) -> float:
    p = ParamPoint.of(theta, gamma)
    return float(np.sum(model.log_q(values, theta))) - len(values) * psi_value(model, p)


def fit_mle(
    model: ModelSpec,
    sample: Sample,
    max_iter: int = 100,
    tol: float = MLE_TOLERANCE,
) -> MleResult:
    """gamma_hat is the sample minimum; theta_hat solves the likelihood equation there."""
    n = sample.n
    d = model.d
    if n < d + 1:
        raise DomainError(f"{model.name} needs at least {d + 1} observations, got {n}")
    values = sample.values
    gamma_hat = sample.minimum
    theta = (
        np.asarray(model.initial_theta(values), dtype=float)
        if model.initial_theta is not None
        else np.asarray(model.start, dtype=float)
    )
    if not model.is_valid(ParamPoint.of(theta, gamma_hat)):
        theta = np.asarray(model.start, dtype=float)

    converged = False
    iterations = 0
    loglik = _log_likelihood(model, values, theta, gamma_hat)
    score, hessian = _score_and_hessian(model, values, theta, gamma_hat)
    for iterations in range(1, max_iter + 1):
        if np.linalg.norm(score) < tol:
            converged = True
            break
        try:
            direction = np.linalg.solve(-hessian, score)
        except np.linalg.LinAlgError:
            direction = score / max(1.0, float(np.max(np.abs(np.diag(hessian)))))
        if direction @ score <= 0:
            # not an ascent direction; fall back to the gradient
            direction = score / max(1.0, float(np.linalg.norm(score)))
        step = 1.0
        for _ in range(60):
            trial = theta + step * direction
            if model.is_valid(ParamPoint.of(trial, gamma_hat)):
                trial_loglik = _log_likelihood(model, values, trial, gamma_hat)
                if trial_loglik >= loglik - 1e-12 * abs(loglik):
                    break
            step *= 0.5
        else:
            break
        moved = float(np.max(np.abs(trial - theta) / np.maximum(np.abs(theta), 1.0)))
        theta, loglik = trial, trial_loglik
        score, hessian = _score_and_hessian(model, values, theta, gamma_hat)
        if np.linalg.norm(score) < tol or moved < 1e-14:
            converged = True
            break
    score_norm = float(np.linalg.norm(score))
    logger.debug(f"MLE of {model.name}: {iterations} Newton iterations, |score| = {score_norm:.3g}")
    if not converged:
        logger.warning(f"Newton iterations for {model.name} stopped without converging")

    p_hat = ParamPoint.of(theta, gamma_hat)
    c_hat = -psi_partial(model, p_hat, (d,))
    if not c_hat > 0:
        raise DegenerateFitError(f"c_hat = {c_hat:.6g} is not positive")
    g_theta_hat = -hessian / n
    g_theta_hat = 0.5 * (g_theta_hat + g_theta_hat.T)
    try:
        np.linalg.cholesky(g_theta_hat)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFitError("observed information is not positive definite") from exc
    return MleResult(
        theta_hat=theta,
        gamma_hat=gamma_hat,
        c_hat=float(c_hat),
        g_theta_hat=g_theta_hat,
        n=n,
        converged=converged,
        iterations=iterations,
        score_norm=score_norm,
    )


@dataclass(frozen=True)
class GridConfig:
    theta_width: float = 8.0
    gamma_width: float = 40.0
    theta_panels: int = 8
    gamma_panels: int = 12
    order: int = 8

    def __post_init__(self):
        if self.theta_width <= 0 or self.gamma_width <= 0:
            raise ConfigError("grid widths must be positive")
        if min(self.theta_panels, self.gamma_panels, self.order) < 1:
            raise ConfigError("grid panels and order must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "GridConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class AxisRule:
    nodes: np.ndarray
    log_weights: np.ndarray
    lower: float
    upper: float


def axis_rule(lower: float, upper: float, panels: int, order: int, split: float = 1.0) -> AxisRule:
    """Composite Gauss-Legendre rule on [lower, upper].

    ``split`` < 1 grades the panel edges geometrically towards ``upper``,
    which is where the gamma posterior concentrates.
    """
    if not upper > lower:
        raise PosteriorError(f"empty integration range [{lower}, {upper}]")
    base, weights = np.polynomial.legendre.leggauss(order)
    if split == 1.0:
        edges = np.linspace(lower, upper, panels + 1)
    else:
        widths = split ** np.arange(panels)
        edges = lower + (upper - lower) * np.concatenate([[0.0], np.cumsum(widths)]) / widths.sum()
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * base[None, :]).ravel()
    w = (half[:, None] * weights[None, :]).ravel()
    return AxisRule(nodes, np.log(w), float(lower), float(upper))


GAMMA_GRADING = 0.7


@dataclass(frozen=True, eq=False)
class PosteriorGrid:
    model: ModelSpec
    mle: MleResult
    prior: PriorSpec
    theta_axes: tuple[AxisRule, ...]
    gamma_axis: AxisRule
    log_post: np.ndarray
    log_Z: float
    config: GridConfig = field(default_factory=GridConfig)
    values: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def theta_nodes(self) -> list[np.ndarray]:
        return [axis.nodes for axis in self.theta_axes]

    @property
    def gamma_nodes(self) -> np.ndarray:
        return self.gamma_axis.nodes

    @property
    def log_weights(self) -> np.ndarray:
        return _log_weight_grid([*self.theta_axes, self.gamma_axis])

    def normalized_weights(self) -> np.ndarray:
        """Posterior mass of each node; sums to one."""
        return np.exp(self.log_post + self.log_weights - self.log_Z)

    def log_density_at(self, theta, gamma) -> np.ndarray:
        """Normalized log posterior density at arbitrary points (theta on the last axis)."""
        theta = np.asarray(theta, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        flat_theta = theta.reshape(-1, self.model.d)
        flat_gamma = np.broadcast_to(gamma, theta.shape[:-1]).ravel()
        sums = log_q_sums(self.model, self.values, flat_theta)
        out = np.full(flat_gamma.shape, -np.inf)
        inside = flat_gamma <= self.mle.gamma_hat
        if np.any(inside):
            psi = _psi_pointwise(self.model, flat_theta[inside], flat_gamma[inside])
            prior = self.prior.log_density_grid(flat_theta[inside], flat_gamma[inside])
            out[inside] = sums[inside] - self.mle.n * psi + prior - self.log_Z
        return out.reshape(theta.shape[:-1])

    def to_dict(self) -> dict:
        return {
            "model": self.model.name,
            "prior": str(self.prior.tag),
            "mle": self.mle.to_dict(),
            "theta_nodes": self.theta_nodes,
            "gamma_nodes": self.gamma_nodes,
            "log_weights": self.log_weights,
            "log_post": self.log_post,
            "log_Z": self.log_Z,
        }


def _log_weight_grid(axes: Sequence[AxisRule]) -> np.ndarray:
    total = np.zeros(())
    for axis in axes:
        total = np.add.outer(total, axis.log_weights)
    return total


def _psi_pointwise(model: ModelSpec, thetas: np.ndarray, gammas: np.ndarray) -> np.ndarray:
    if model.psi is not None:
        return np.asarray(model.psi(thetas, gammas), dtype=float)
    return np.array([psi_value(model, ParamPoint.of(t, g)) for t, g in zip(thetas, gammas)])


def _theta_mesh(axes: Sequence[AxisRule]) -> np.ndarray:
    mesh = np.meshgrid(*[axis.nodes for axis in axes], indexing="ij")
    return np.stack(mesh, axis=-1)


def _log_posterior(
    model: ModelSpec,
    values: np.ndarray,
    prior: PriorSpec,
    theta_axes: Sequence[AxisRule],
    gamma_axis: AxisRule,
) -> np.ndarray:
    """Unnormalized log posterior on the tensor grid, shape (*theta sizes, gamma size)."""
    thetas = _theta_mesh(theta_axes)
    flat = thetas.reshape(-1, model.d)
    sums = log_q_sums(model, values, flat).reshape(thetas.shape[:-1])
    gammas = gamma_axis.nodes
    if model.psi is not None:
        psi = np.asarray(model.psi(thetas[..., None, :], gammas), dtype=float)
    else:
        grid_t = np.broadcast_to(flat[:, None, :], (len(flat), len(gammas), model.d))
        grid_g = np.broadcast_to(gammas, (len(flat), len(gammas)))
        psi = _psi_pointwise(model, grid_t.reshape(-1, model.d), grid_g.ravel()).reshape(
            thetas.shape[:-1] + (len(gammas),)
        )
    log_prior = prior.log_density_grid(thetas[..., None, :], gammas)
    log_post = sums[..., None] - len(values) * psi + log_prior
    log_post = np.where(np.isnan(log_post), -np.inf, log_post)
    return log_post


def _log_mass(log_post: np.ndarray, axes: Sequence[AxisRule]) -> float:
    return float(logsumexp(log_post + _log_weight_grid(axes)))


def _theta_axes(model: ModelSpec, mle: MleResult, cfg: GridConfig) -> list[AxisRule]:
    sd = np.sqrt(np.diag(mle.g_theta_inv) / mle.n)
    axes = []
    for i in range(model.d):
        centre = float(mle.theta_hat[i])
        lo = centre - cfg.theta_width * sd[i]
        hi = centre + cfg.theta_width * sd[i]
        margin = 1e-9 * max(1.0, abs(centre))
        lo = max(lo, model.theta_lower[i] + margin)
        hi = min(hi, model.theta_upper[i] - margin)
        axes.append(axis_rule(lo, hi, cfg.theta_panels, cfg.order))
    return axes


def _gamma_axis(mle: MleResult, cfg: GridConfig, lower: Optional[float] = None, upper: Optional[float] = None) -> AxisRule:
    lo = mle.gamma_hat - cfg.gamma_width / (mle.n * mle.c_hat) if lower is None else lower
    hi = mle.gamma_hat if upper is None else upper
    return axis_rule(lo, hi, cfg.gamma_panels, cfg.order, split=GAMMA_GRADING)


def posterior_grid(
    model: ModelSpec,
    sample: Sample,
    prior: PriorSpec,
    cfg: Optional[GridConfig] = None,
    mle: Optional[MleResult] = None,
) -> PosteriorGrid:
    cfg = cfg or GridConfig()
    mle = mle or fit_mle(model, sample)
    theta_axes = _theta_axes(model, mle, cfg)
    gamma_axis = _gamma_axis(mle, cfg)
    log_post = _log_posterior(model, sample.values, prior, theta_axes, gamma_axis)
    finite = log_post[np.isfinite(log_post)]
    if finite.size == 0:
        raise PosteriorError("posterior is zero on the whole grid")
    log_Z = _log_mass(log_post, [*theta_axes, gamma_axis])
    if not math.isfinite(log_Z):
        raise PosteriorError(f"posterior normalizer is not finite: {log_Z}")
    return PosteriorGrid(
        model=model,
        mle=mle,
        prior=prior,
        theta_axes=tuple(theta_axes),
        gamma_axis=gamma_axis,
        log_post=log_post,
        log_Z=log_Z,
        config=cfg,
        values=sample.values,
    )


@dataclass(frozen=True)
class Pivot:
    """T = n c_hat (gamma - gamma_hat), or U(i) = sqrt(n) (theta_i - theta_hat_i) / sigma_i."""

    kind: str
    component: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("T", "U"):
            raise ConfigError(f"unknown pivot {self.kind!r}")
        if self.kind == "U" and self.component is None:
            object.__setattr__(self, "component", 0)

    def __str__(self) -> str:
        return "T" if self.kind == "T" else f"U{self.component + 1}"

    @classmethod
    def parse(cls, text: str) -> "Pivot":
        text = text.strip().upper()
        if text == "T":
            return cls("T")
        if text.startswith("U"):
            rest = text[1:].strip("()_:")
            try:
                component = int(rest) - 1 if rest else 0
            except ValueError as exc:
                raise ConfigError(f"bad pivot {text!r}") from exc
            if component < 0:
                raise ConfigError("pivot components are numbered from 1")
            return cls("U", component)
        raise ConfigError(f"unknown pivot {text!r}; use T or U<i>")

    def value(self, mle: MleResult, point: ParamPoint) -> float:
        """The pivot evaluated at a parameter point."""
        if self.kind == "T":
            return mle.n * mle.c_hat * (point.gamma - mle.gamma_hat)
        i = self.component
        sigma = math.sqrt(mle.g_theta_inv[i, i])
        return math.sqrt(mle.n) * (point.theta[i] - mle.theta_hat[i]) / sigma


def pivot_cdf(post: PosteriorGrid, pivot: Pivot | str, z: float) -> tuple[float, bool]:
    """(P(pivot <= z | X), clamped). ``clamped`` marks z outside the grid range."""
    pivot = Pivot.parse(pivot) if isinstance(pivot, str) else pivot
    mle = post.mle
    if pivot.kind == "T":
        cut = mle.gamma_hat + z / (mle.n * mle.c_hat)
        lower, upper = post.gamma_axis.lower, post.gamma_axis.upper
        if cut <= lower:
            return 0.0, True
        if cut >= upper:
            return 1.0, cut > upper
        axis = _gamma_axis(mle, post.config, lower=lower, upper=cut)
        theta_axes = list(post.theta_axes)
        log_post = _log_posterior(post.model, post.values, post.prior, theta_axes, axis)
        mass = math.exp(_log_mass(log_post, [*theta_axes, axis]) - post.log_Z)
        return min(max(mass, 0.0), 1.0), False

    i = pivot.component
    if i >= post.model.d:
        raise ConfigError(f"pivot {pivot} needs d >= {i + 1}")
    sigma = math.sqrt(mle.g_theta_inv[i, i])
    cut = mle.theta_hat[i] + z * sigma / math.sqrt(mle.n)
    lower, upper = post.theta_axes[i].lower, post.theta_axes[i].upper
    if cut <= lower:
        return 0.0, True
    if cut >= upper:
        return 1.0, True
    theta_axes = list(post.theta_axes)
    theta_axes[i] = axis_rule(lower, cut, post.config.theta_panels, post.config.order)
    log_post = _log_posterior(post.model, post.values, post.prior, theta_axes, post.gamma_axis)
    mass = math.exp(_log_mass(log_post, [*theta_axes, post.gamma_axis]) - post.log_Z)
    return min(max(mass, 0.0), 1.0), False


def posterior_means(post: PosteriorGrid) -> tuple[np.ndarray, float]:
    weights = post.normalized_weights()
    thetas = _theta_mesh(post.theta_axes)
    theta_bar = np.einsum("...g,...i->i", weights, thetas)
    gamma_bar = float(np.sum(weights * post.gamma_nodes))
    return theta_bar, gamma_bar


def marginal_gamma(post: PosteriorGrid) -> tuple[np.ndarray, np.ndarray]:
    """(gamma nodes, marginal posterior density of gamma at those nodes)."""
    log_w = _log_weight_grid(post.theta_axes)
    log_marginal = logsumexp(post.log_post + log_w[..., None], axis=tuple(range(post.model.d)))
    return post.gamma_nodes, np.exp(log_marginal - post.log_Z)


def write_posterior_json(post: PosteriorGrid, path: str | Path, config: Optional[dict] = None) -> Path:
    return write_json({"metadata": metadata(config), "posterior": post.to_dict()}, path)


__all__ = [
    "AxisRule",
    "GridConfig",
    "MleResult",
    "Pivot",
    "PosteriorGrid",
    "axis_rule",
    "fit_mle",
    "marginal_gamma",
    "pivot_cdf",
    "posterior_grid",
    "posterior_means",
    "write_posterior_json",
]
