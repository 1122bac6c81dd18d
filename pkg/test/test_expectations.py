import math

import numpy as np
import pytest

from truncgeo.exceptions import DomainError
from truncgeo.expectations import a_tensor, c_value, expect, fill_symmetric, score_products
from truncgeo.models import ParamPoint
from truncgeo.quadrature import QuadratureConfig

THETAS = [0.5, 1.0, 2.0, 5.0]
GAMMAS = [-1.0, 0.0, 2.0]


@pytest.mark.parametrize("theta", THETAS)
@pytest.mark.parametrize("gamma", GAMMAS)
class TestTruncatedExponential:
    def test_metric_block(self, texp, theta, gamma):
        p = ParamPoint.of([theta], gamma)
        assert -float(a_tensor(texp, p, 2, 0)) == pytest.approx(1.0 / theta**2, rel=1e-8)

    def test_mixed_and_third_order(self, texp, theta, gamma):
        p = ParamPoint.of([theta], gamma)
        assert float(a_tensor(texp, p, 1, 1)) == pytest.approx(1.0, rel=1e-8)
        assert float(a_tensor(texp, p, 2, 1)) == pytest.approx(0.0, abs=1e-10)
        assert float(a_tensor(texp, p, 3, 0)) == pytest.approx(2.0 / theta**3, rel=1e-8)
        assert float(a_tensor(texp, p, 0, 2)) == pytest.approx(0.0, abs=1e-10)

    def test_c_is_theta(self, texp, theta, gamma):
        p = ParamPoint.of([theta], gamma)
        assert c_value(texp, p) == pytest.approx(theta, rel=1e-8)
        assert c_value(texp, p, cfg=QuadratureConfig(rel_tol=1e-11)) == pytest.approx(theta, rel=1e-9)

    def test_shortcut_agrees_with_quadrature(self, texp, theta, gamma):
        p = ParamPoint.of([theta], gamma)
        for r, s in [(1, 0), (2, 0), (3, 0), (1, 1)]:
            full = a_tensor(texp, p, r, s).data
            short = a_tensor(texp, p, r, s, shortcut=True).data
            np.testing.assert_allclose(full, short, rtol=1e-8, atol=1e-10)


def test_mean_of_the_truncated_exponential(texp):
    result = expect(texp, ParamPoint.of([2.0], 1.0), lambda x: x)
    assert result.value == pytest.approx(1.5, rel=1e-10)


def test_row_integrand(texp):
    result = expect(texp, ParamPoint.of([1.0], 0.0), lambda x: np.stack([np.ones_like(x), x, x * x], axis=-1))
    np.testing.assert_allclose(result.value, [1.0, 1.0, 2.0], rtol=1e-9)


def test_gamma_metric_of_the_half_normal(tnorm):
    p = ParamPoint.of([0.0, -0.5], 0.0)
    assert c_value(tnorm, p) ** 2 == pytest.approx(2.0 / math.pi, rel=1e-9)
    assert c_value(tnorm, p) ** 2 == pytest.approx(0.63662, abs=1e-5)


def test_normal_metric_is_symmetric_and_matches_quadrature(tnorm):
    p = ParamPoint.of([0.4, -0.7], -0.2)
    full = a_tensor(tnorm, p, 2, 0).tensor
    short = a_tensor(tnorm, p, 2, 0, shortcut=True).tensor
    np.testing.assert_allclose(full, full.T)
    np.testing.assert_allclose(full, short, rtol=1e-7, atol=1e-9)


def test_first_order_score_has_mean_zero(tnorm):
    data = a_tensor(tnorm, ParamPoint.of([1.0, -0.5], 0.5), 1, 0).data
    np.testing.assert_allclose(data, 0.0, atol=1e-9)


def test_score_products_of_the_exponential(texp):
    theta = 2.0
    triple, mixed = score_products(texp, ParamPoint.of([theta], 0.0))
    # score = 1/theta - (x - gamma): third central moment of -X
    assert triple[0, 0, 0] == pytest.approx(-2.0 / theta**3, rel=1e-8)
    assert mixed[0, 0, 0] == pytest.approx(0.0, abs=1e-10)


def test_order_limit(texp):
    with pytest.raises(DomainError):
        a_tensor(texp, ParamPoint.of([1.0], 0.0), 3, 2)


def test_scalar_conversion_needs_one_entry(tnorm):
    tensor = a_tensor(tnorm, ParamPoint.of([0.0, -0.5], 0.0), 1, 1, shortcut=True)
    with pytest.raises(TypeError):
        float(tensor)


def test_fill_symmetric():
    data = fill_symmetric(2, 2, {(0, 0): 1.0, (0, 1): 2.0, (1, 1): 3.0})
    np.testing.assert_array_equal(data.reshape(2, 2), [[1.0, 2.0], [2.0, 3.0]])
