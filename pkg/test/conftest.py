import numpy as np
import pytest

from truncgeo import cache
from truncgeo.config import ConfigManager
from truncgeo.models import ParamPoint, draw_sample, trunc_exp, trunc_normal_natural, trunc_normal_unit


@pytest.fixture
def texp():
    return trunc_exp()


@pytest.fixture
def tnorm():
    return trunc_normal_natural()


@pytest.fixture
def tunit():
    return trunc_normal_unit()


@pytest.fixture
def texp_sample(texp):
    return draw_sample(texp, ParamPoint.of([2.0], 0.0), 200, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(autouse=True)
def isolated_config(tmp_path, monkeypatch):
    """Every test sees an empty home directory and a fresh config singleton."""
    monkeypatch.setenv("HOME", str(tmp_path))
    monkeypatch.delenv("TRUNCGEO_THREADS", raising=False)
    ConfigManager.reset()
    yield
    ConfigManager.reset()


@pytest.fixture
def test_db():
    db = cache.init_test_db()
    yield db
    cache.clean_test_db(db)
