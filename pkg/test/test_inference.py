import json
import math

import numpy as np
import pytest
from scipy import stats

from truncgeo.exceptions import ConfigError, DomainError, PosteriorError
from truncgeo.inference import (
    GridConfig,
    Pivot,
    axis_rule,
    fit_mle,
    marginal_gamma,
    pivot_cdf,
    posterior_grid,
    posterior_means,
    write_posterior_json,
)
from truncgeo.models import ParamPoint, Sample, draw_sample
from truncgeo.priors import custom_prior


@pytest.fixture
def flat_posterior(texp, texp_sample):
    return posterior_grid(texp, texp_sample, custom_prior("1", texp))


class TestMle:
    def test_exponential_closed_form(self, texp, texp_sample):
        mle = fit_mle(texp, texp_sample)
        values = texp_sample.values
        assert mle.converged
        assert mle.gamma_hat == values.min()
        assert mle.theta_hat[0] == pytest.approx(1.0 / (values.mean() - values.min()), rel=1e-9)
        assert mle.c_hat == pytest.approx(mle.theta_hat[0], rel=1e-12)
        assert mle.g_theta_hat[0, 0] == pytest.approx(1.0 / mle.theta_hat[0] ** 2, rel=1e-9)
        assert mle.gamma_star == pytest.approx(mle.gamma_hat - 1.0 / (200 * mle.c_hat))

    def test_two_parameter_normal(self, tnorm):
        truth = ParamPoint.of([0.5, -0.8], 0.2)
        sample = draw_sample(tnorm, truth, 2000, seed=21)
        mle = fit_mle(tnorm, sample)
        assert mle.converged and mle.score_norm < 1e-6
        np.testing.assert_allclose(mle.theta_hat, truth.theta_array, atol=0.3)
        assert mle.gamma_hat >= truth.gamma

    def test_too_few_observations(self, texp):
        with pytest.raises(DomainError):
            fit_mle(texp, Sample.from_values([1.0]))

    def test_serializes(self, texp, texp_sample):
        data = fit_mle(texp, texp_sample).to_dict()
        assert set(data) >= {"theta_hat", "gamma_hat", "gamma_star", "c_hat", "converged"}


class TestFlatPosterior:
    """Flat prior on the exponential: theta | X ~ Gamma(n, S), gamma | theta, X is a reflected exponential."""

    def test_t_pivot_law(self, flat_posterior):
        n = flat_posterior.mle.n
        for z in (-0.5, -1.0, -3.0):
            mass, clamped = pivot_cdf(flat_posterior, "T", z)
            assert not clamped
            assert mass == pytest.approx((1.0 - z / n) ** -n, rel=1e-6)

    def test_u_pivot_at_zero(self, flat_posterior):
        n = flat_posterior.mle.n
        mass, _ = pivot_cdf(flat_posterior, Pivot("U", 0), 0.0)
        assert mass == pytest.approx(stats.gamma.cdf(n, a=n), rel=1e-6)

    def test_clamping(self, flat_posterior):
        assert pivot_cdf(flat_posterior, "T", -1e3) == (0.0, True)
        assert pivot_cdf(flat_posterior, "T", 0.0) == (1.0, False)
        assert pivot_cdf(flat_posterior, "U1", 1e3) == (1.0, True)

    def test_posterior_means(self, flat_posterior, texp_sample):
        n = texp_sample.n
        spread = float(np.sum(texp_sample.values - texp_sample.minimum))
        theta_bar, gamma_bar = posterior_means(flat_posterior)
        assert theta_bar[0] == pytest.approx(n / spread, rel=1e-6)
        assert gamma_bar == pytest.approx(texp_sample.minimum - spread / (n * (n - 1)), abs=1e-7)

    def test_weights_and_marginal_are_normalized(self, flat_posterior):
        assert flat_posterior.normalized_weights().sum() == pytest.approx(1.0, rel=1e-12)
        nodes, density = marginal_gamma(flat_posterior)
        weights = np.exp(flat_posterior.gamma_axis.log_weights)
        assert float(np.sum(weights * density)) == pytest.approx(1.0, rel=1e-10)
        assert nodes.max() <= flat_posterior.mle.gamma_hat

    def test_density_is_zero_above_the_minimum(self, flat_posterior):
        mle = flat_posterior.mle
        theta = np.array([[mle.theta_hat[0]], [mle.theta_hat[0]]])
        values = flat_posterior.log_density_at(theta, np.array([mle.gamma_hat - 1e-3, mle.gamma_hat + 1e-3]))
        assert np.isfinite(values[0]) and values[1] == -np.inf

    def test_json(self, flat_posterior, tmp_path):
        path = write_posterior_json(flat_posterior, tmp_path / "post.json", {"prior": "1"})
        data = json.loads(path.read_text())
        assert data["posterior"]["prior"] == "custom(1)"
        assert math.isfinite(data["posterior"]["log_Z"])


class TestPivot:
    @pytest.mark.parametrize("text, component", [("u", 0), ("U2", 1), ("U(3)", 2), ("u_1", 0)])
    def test_parse_u(self, text, component):
        assert Pivot.parse(text) == Pivot("U", component)

    @pytest.mark.parametrize("text", ["V", "U0", "Ux", ""])
    def test_bad_pivots(self, text):
        with pytest.raises(ConfigError):
            Pivot.parse(text)

    def test_component_beyond_d(self, flat_posterior):
        with pytest.raises(ConfigError):
            pivot_cdf(flat_posterior, "U2", 0.0)

    def test_value(self, texp, texp_sample):
        mle = fit_mle(texp, texp_sample)
        point = ParamPoint.of(mle.theta_hat, mle.gamma_hat - 1.0)
        assert Pivot("T").value(mle, point) == pytest.approx(-mle.n * mle.c_hat)
        assert str(Pivot("U", 1)) == "U2"


class TestGrid:
    def test_from_dict(self):
        assert GridConfig.from_dict({"order": 6}).order == 6
        with pytest.raises(ConfigError):
            GridConfig.from_dict({"orders": 6})
        with pytest.raises(ConfigError):
            GridConfig(theta_width=0.0)

    def test_axis_rule_integrates_polynomials(self):
        rule = axis_rule(0.0, 2.0, 3, 4)
        assert float(np.sum(np.exp(rule.log_weights) * rule.nodes**3)) == pytest.approx(4.0, rel=1e-13)
        graded = axis_rule(0.0, 2.0, 6, 4, split=0.7)
        assert float(np.sum(np.exp(graded.log_weights))) == pytest.approx(2.0, rel=1e-13)

    def test_empty_range(self):
        with pytest.raises(PosteriorError):
            axis_rule(1.0, 1.0, 2, 4)
