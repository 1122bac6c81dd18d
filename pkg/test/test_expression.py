import math

import numpy as np
import pytest

from truncgeo.exceptions import ConfigError
from truncgeo.expression import compile_expression, theta_names


def test_arithmetic_and_functions():
    expr = compile_expression("sqrt(theta) * exp(-gamma) + 2^3 - pow(gamma, 2)", ["theta", "gamma"])
    value = expr({"theta": 4.0, "gamma": 1.0})
    assert float(value) == pytest.approx(2.0 * math.exp(-1.0) + 8.0 - 1.0)
    assert expr.names == {"theta", "gamma"}


def test_broadcasts_over_arrays():
    expr = compile_expression("1 / theta_1 + log(e) * gamma", ["theta_1", "gamma"])
    value = expr({"theta_1": np.array([1.0, 2.0]), "gamma": np.array([[0.0], [1.0]])})
    np.testing.assert_allclose(value, [[1.0, 0.5], [2.0, 1.5]])


def test_constant_expression_uses_no_names():
    expr = compile_expression("2 * pi", ["theta"])
    assert expr.names == frozenset()
    assert float(expr({})) == pytest.approx(2 * math.pi)


@pytest.mark.parametrize(
    "text",
    [
        "",
        "theta +",
        "__import__('os')",
        "theta.real",
        "mu * 2",
        "sin(theta)",
        "log(theta, 2)",
        "[theta]",
        "theta if gamma else 1",
        "True * theta",
    ],
)
def test_rejected(text):
    with pytest.raises(ConfigError):
        compile_expression(text, ["theta", "gamma"])


def test_theta_names():
    names = theta_names(2, ("alpha", "beta"))
    assert names == {"theta_1": 0, "theta1": 0, "theta_2": 1, "theta2": 1, "alpha": 0, "beta": 1}
    assert theta_names(1)["theta"] == 0
