"""Asymptotic expansion of the posterior in the local coordinates (u, t).

u = sqrt(n) (theta - theta_hat) and t = n c_hat (gamma - gamma_hat) <= 0. The
leading term is a normal density in u times e^t; the corrections of order
n^(-1/2) and n^(-1) are polynomials in (u, t) whose coefficients are sample
averages of log-likelihood derivatives at the MLE together with derivatives
of the prior there.

Rank-r tensors are flat arrays of length d**r in row-major order, so the
Kronecker power u^(x)r lines up with ``tensor.ravel()``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special, stats as sp_stats

from truncgeo import numdiff
from truncgeo.exceptions import UnsupportedModelError
from truncgeo.expectations import a_tensor, fill_symmetric
from truncgeo.geometry import metric_blocks
from truncgeo.inference import MleResult, PosteriorGrid, fit_mle
from truncgeo.models import ModelSpec, ParamPoint, Sample, log_p_partial
from truncgeo.priors import PriorSpec

logger = logging.getLogger(__name__)

EXPANSION_ORDERS = (1, 1), (3, 0), (0, 2), (2, 1), (4, 0)


def symmetrize(data, d: int, r: int) -> np.ndarray:
    """Average a flat rank-r tensor over all r! permutations of its indices."""
    data = np.asarray(data, dtype=float).ravel()
    if data.size != d**r:
        raise ValueError(f"a rank-{r} tensor in dimension {d} has {d ** r} entries, got {data.size}")
    if r < 2:
        return data.copy()
    tensor = data.reshape((d,) * r)
    total = np.zeros_like(tensor)
    for perm in itertools.permutations(range(r)):
        total += np.transpose(tensor, perm)
    return (total / math.factorial(r)).ravel()


def kron_power(v, r: int) -> np.ndarray:
    """v^(x)r; a leading batch shape of v is kept."""
    v = np.asarray(v, dtype=float)
    out = np.ones(v.shape[:-1] + (1,))
    for _ in range(r):
        out = (out[..., :, None] * v[..., None, :]).reshape(v.shape[:-1] + (-1,))
    return out


def double_factorial(k: int) -> int:
    return int(np.prod(np.arange(k, 0, -2))) if k > 0 else 1


def gaussian_moment(g_inv, r: int) -> np.ndarray:
    """E[u^(x)r] for u ~ N(0, g_inv): (r-1)!! S_r vec(g_inv)^(x)(r/2), zero for odd r."""
    g_inv = np.asarray(g_inv, dtype=float)
    d = g_inv.shape[0]
    if r % 2:
        return np.zeros(d**r)
    if r == 0:
        return np.ones(1)
    return double_factorial(r - 1) * symmetrize(kron_power(g_inv.ravel(), r // 2), d, r)


def exponential_moment(r: int) -> float:
    """Integral of t^r e^t over t <= 0."""
    return float(math.factorial(r) * (-1) ** r)


@dataclass(frozen=True, eq=False)
class ExpansionStats:
    """Hat quantities of the expansion at the MLE of one sample."""

    mle: MleResult
    a_hats: dict
    grad_log_pi: np.ndarray
    dgamma_log_pi: float
    pi_hessian_ratio: np.ndarray

    @property
    def n(self) -> int:
        return self.mle.n

    @property
    def d(self) -> int:
        return len(self.mle.theta_hat)

    @property
    def c(self) -> float:
        return self.mle.c_hat

    @property
    def g(self) -> np.ndarray:
        return self.mle.g_theta_hat

    @property
    def g_inv(self) -> np.ndarray:
        return self.mle.g_theta_inv

    def tensor(self, r: int, s: int) -> np.ndarray:
        return self.a_hats[(r, s)]

    @property
    def a30_trace(self) -> np.ndarray:
        """A^(3,0)_{ijk} g^{jk}."""
        return np.einsum("ijk,jk->i", self.tensor(3, 0), self.g_inv)

    def marginal_t_coefficients(self) -> tuple[float, float]:
        """(P, Q) of the marginal density e^t [1 + P (t+1)/(n c) + Q (t^2-2)/(n c^2)]."""
        return _marginal_t_coefficients(
            self.tensor(1, 1),
            self.tensor(2, 1),
            self.tensor(3, 0),
            float(self.tensor(0, 2)),
            self.g_inv,
            self.grad_log_pi,
            self.dgamma_log_pi,
        )

    def normalizer_correction(self) -> float:
        """K_n / pi_hat: the order 1/n term of the normalizing integral."""
        a11, a21, a02, a40 = (self.tensor(1, 1), self.tensor(2, 1), float(self.tensor(0, 2)), self.tensor(4, 0))
        a30 = self.tensor(3, 0)
        gi, c, a = self.g_inv, self.c, self.grad_log_pi
        x30 = self.a30_trace
        return float(
            -self.dgamma_log_pi / c
            + 0.5 * np.sum(self.pi_hessian_ratio * gi)
            - a @ gi @ a11 / c
            + 0.5 * a @ gi @ x30
            + a02 / c**2
            - 0.5 * np.sum(a21 * gi) / c
            + 3.0 / 24.0 * np.einsum("ijkl,ij,kl->", a40, gi, gi)
            + a11 @ gi @ a11 / c**2
            + 15.0 / 72.0 * sextic_term(a30, gi)
            - 0.5 * a11 @ gi @ x30 / c
        )


def sextic_term(a30: np.ndarray, g_inv: np.ndarray) -> float:
    """(A^(3,0) (x) A^(3,0))' S_6 vec(g^-1)^(x)3."""
    d = g_inv.shape[0]
    flat = symmetrize(kron_power(g_inv.ravel(), 3), d, 6)
    return float(np.kron(a30.ravel(), a30.ravel()) @ flat)


def _marginal_t_coefficients(a11, a21, a30, a02, gi, grad_log_pi, dgamma_log_pi):
    x30 = np.einsum("ijk,jk->i", a30, gi)
    p = (
        dgamma_log_pi
        + grad_log_pi @ gi @ a11
        + 0.5 * np.sum(a21 * gi)
        + 0.5 * a11 @ gi @ x30
    )
    q = 0.5 * a02 + 0.5 * a11 @ gi @ a11
    return float(p), float(q)


def _sample_tensor(model: ModelSpec, values: np.ndarray, p: ParamPoint, r: int, s: int) -> np.ndarray:
    d = model.d
    unique = list(itertools.combinations_with_replacement(range(d), r))
    averages = {
        idx: float(np.mean(log_p_partial(model, values, p, idx + (d,) * s))) for idx in unique
    }
    data = fill_symmetric(d, r, averages)
    return data.reshape((d,) * r) if r else data.reshape(())


def _prior_derivatives(prior: PriorSpec, p: ParamPoint):
    grad_theta, grad_gamma = prior.gradient(p)
    d = p.d

    def log_pi(vector):
        return float(prior.log_pi(vector[:-1], vector[-1]))

    hessian = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            hessian[i, j] = hessian[j, i] = float(numdiff.partial(log_pi, p.as_vector(), (i, j)))
    return grad_theta, grad_gamma, hessian + np.outer(grad_theta, grad_theta)


def expansion_stats(
    model: ModelSpec,
    sample: Sample,
    prior: PriorSpec,
    mle: Optional[MleResult] = None,
) -> ExpansionStats:
    mle = mle or fit_mle(model, sample)
    p_hat = mle.point
    a_hats = {(r, s): _sample_tensor(model, sample.values, p_hat, r, s) for r, s in EXPANSION_ORDERS}
    grad_theta, grad_gamma, ratio = _prior_derivatives(prior, p_hat)
    return ExpansionStats(
        mle=mle,
        a_hats=a_hats,
        grad_log_pi=np.asarray(grad_theta, dtype=float),
        dgamma_log_pi=float(grad_gamma),
        pi_hessian_ratio=ratio,
    )


def leading_density(stats: ExpansionStats, u, t) -> np.ndarray:
    """(2 pi)^(-d/2) det(g)^(1/2) exp(t - u' g u / 2) on t <= 0."""
    u = np.asarray(u, dtype=float)
    t = np.asarray(t, dtype=float)
    d = stats.d
    _, log_det = np.linalg.slogdet(stats.g)
    quad = np.einsum("...i,ij,...j->...", u, stats.g, u)
    log_value = -0.5 * d * math.log(2.0 * math.pi) + 0.5 * log_det + t - 0.5 * quad
    return np.where(t <= 0.0, np.exp(np.minimum(log_value, 700.0)), 0.0)


def correction_terms(stats: ExpansionStats, u, t) -> tuple[np.ndarray, np.ndarray]:
    """(B1, B2) at (u, t)."""
    u = np.asarray(u, dtype=float)
    t = np.asarray(t, dtype=float)
    c = stats.c
    a11, a21, a30, a40 = (stats.tensor(1, 1), stats.tensor(2, 1), stats.tensor(3, 0), stats.tensor(4, 0))
    a02 = float(stats.tensor(0, 2))

    prior_1 = u @ stats.grad_log_pi
    prior_2 = stats.dgamma_log_pi * t / c + 0.5 * np.einsum("...i,ij,...j->...", u, stats.pi_hessian_ratio, u)
    lik_1 = (u @ a11) * t / c + np.einsum("ijk,...i,...j,...k->...", a30, u, u, u) / 6.0
    lik_2 = (
        0.5 * a02 * t**2 / c**2
        + 0.5 * np.einsum("ij,...i,...j->...", a21, u, u) * t / c
        + np.einsum("ijkl,...i,...j,...k,...l->...", a40, u, u, u, u) / 24.0
    )
    b1 = prior_1 + lik_1
    b2 = prior_1 * lik_1 + prior_2 + lik_2 + 0.5 * lik_1**2 - stats.normalizer_correction()
    return b1, b2


def expansion_density(stats: ExpansionStats, u, t, order: int = 2) -> np.ndarray:
    """Posterior density of (u, t) truncated after the n^(-order/2) term."""
    if order not in (0, 1, 2):
        raise UnsupportedModelError(f"expansion order {order} is not available; use 0, 1 or 2")
    base = leading_density(stats, u, t)
    if order == 0:
        return base
    b1, b2 = correction_terms(stats, u, t)
    factor = 1.0 + b1 / math.sqrt(stats.n)
    if order == 2:
        factor = factor + b2 / stats.n
    return base * factor


def marginal_t_density(stats: ExpansionStats, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    p, q = stats.marginal_t_coefficients()
    n, c = stats.n, stats.c
    value = np.exp(np.minimum(t, 0.0)) * (1.0 + p * (t + 1.0) / (n * c) + q * (t**2 - 2.0) / (n * c**2))
    return np.where(t <= 0.0, value, 0.0)


def marginal_t_cdf(stats: ExpansionStats, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    p, q = stats.marginal_t_coefficients()
    n, c = stats.n, stats.c
    zc = np.minimum(z, 0.0)
    value = np.exp(zc) * (1.0 + p * zc / (n * c) + q * zc * (zc - 2.0) / (n * c**2))
    return np.where(z < 0.0, value, 1.0)


def posterior_mean_t(stats: ExpansionStats) -> float:
    p, q = stats.marginal_t_coefficients()
    n, c = stats.n, stats.c
    return -1.0 + p / (n * c) - 4.0 * q / (n * c**2)


def gamma_bayes_expansion(stats: ExpansionStats) -> float:
    """Posterior mean of gamma to order n^-2."""
    return stats.mle.gamma_hat + posterior_mean_t(stats) / (stats.n * stats.c)


def marginal_u_density(stats: ExpansionStats, u) -> np.ndarray:
    """First-order marginal density of u."""
    u = np.asarray(u, dtype=float)
    gaussian = sp_stats.multivariate_normal(mean=np.zeros(stats.d), cov=stats.g_inv).pdf(u)
    shift = stats.grad_log_pi - stats.tensor(1, 1) / stats.c
    cubic = np.einsum("ijk,...i,...j,...k->...", stats.tensor(3, 0), u, u, u) / 6.0
    return gaussian * (1.0 + (u @ shift + cubic) / math.sqrt(stats.n))


def marginal_u_cdf(stats: ExpansionStats, z, component: int = 0) -> np.ndarray:
    """First-order P(U^i / sigma_i <= z | X) with sigma_i = sqrt(g^ii)."""
    z = np.asarray(z, dtype=float)
    i = component
    gi = stats.g_inv
    m = gi[:, i] / gi[i, i]
    h = gi - np.outer(gi[:, i], gi[i, :]) / gi[i, i]
    sigma = math.sqrt(gi[i, i])
    a30 = stats.tensor(3, 0)
    linear = (stats.grad_log_pi - stats.tensor(1, 1) / stats.c) @ m + 0.5 * np.einsum(
        "jkl,jk,l->", a30, h, m
    )
    cubic = np.einsum("jkl,j,k,l->", a30, m, m, m) / 6.0
    phi = sp_stats.norm.pdf(z)
    return special.ndtr(z) - (linear * sigma + cubic * sigma**3 * (z**2 + 2.0)) * phi / math.sqrt(stats.n)


def _population_terms(model: ModelSpec, p: ParamPoint, prior: PriorSpec, cfg=None):
    g_theta, _ = metric_blocks(model, p, cfg)
    gi = np.linalg.inv(g_theta)
    a11 = a_tensor(model, p, 1, 1, cfg, shortcut=True).tensor
    a21 = a_tensor(model, p, 2, 1, cfg, shortcut=True).tensor
    a30 = a_tensor(model, p, 3, 0, cfg, shortcut=True).tensor
    a02 = float(a_tensor(model, p, 0, 2, cfg, shortcut=True))
    c = float(a_tensor(model, p, 0, 1, cfg, shortcut=True))
    grad_theta, grad_gamma = prior.gradient(p)
    return gi, a11, a21, a30, a02, c, grad_theta, grad_gamma


def gamma_moment_limit(model: ModelSpec, p: ParamPoint, prior: PriorSpec, cfg=None) -> float:
    """Probability limit of n^2 (gamma_B - gamma_star) at the true parameter."""
    gi, a11, a21, a30, a02, c, grad_theta, grad_gamma = _population_terms(model, p, prior, cfg)
    pc, qc = _marginal_t_coefficients(a11, a21, a30, a02, gi, grad_theta, grad_gamma)
    return (pc - 4.0 * qc / c) / c**2


def theta_moment_limit(model: ModelSpec, p: ParamPoint, prior: PriorSpec, cfg=None) -> np.ndarray:
    """Probability limit of n (theta_B - theta_hat) at the true parameter."""
    gi, a11, _, a30, _, c, grad_theta, _ = _population_terms(model, p, prior, cfg)
    return gi @ grad_theta - gi @ a11 / c + 0.5 * gi @ np.einsum("jkl,kl->j", a30, gi)


@dataclass(frozen=True)
class ExpansionBox:
    """Box of standardized u (in units of sqrt(g^ii)) and t for gap measurements."""

    z_max: float = 3.0
    t_min: float = -5.0
    points: int = 25


def exact_local_density(post: PosteriorGrid, u, t) -> np.ndarray:
    """The grid posterior carried to the (u, t) coordinates."""
    mle = post.mle
    u = np.asarray(u, dtype=float)
    t = np.asarray(t, dtype=float)
    theta = mle.theta_hat + u / math.sqrt(mle.n)
    gamma = mle.gamma_hat + t / (mle.n * mle.c_hat)
    log_jac = -(0.5 * len(mle.theta_hat) * math.log(mle.n) + math.log(mle.n * mle.c_hat))
    return np.exp(post.log_density_at(theta, gamma) + log_jac)


def expansion_gap(
    stats: ExpansionStats,
    post: PosteriorGrid,
    order: int,
    box: Optional[ExpansionBox] = None,
) -> float:
    """Sup-norm distance between the order-k expansion and the exact posterior over the box."""
    box = box or ExpansionBox()
    d = stats.d
    sigma = np.sqrt(np.diag(stats.g_inv))
    axes = [np.linspace(-box.z_max, box.z_max, box.points) * sigma[i] for i in range(d)]
    axes.append(np.linspace(box.t_min, 0.0, box.points))
    mesh = np.meshgrid(*axes, indexing="ij")
    u = np.stack(mesh[:d], axis=-1)
    t = mesh[d]
    approx = expansion_density(stats, u, t, order)
    exact = exact_local_density(post, u, t)
    return float(np.max(np.abs(approx - exact)))
