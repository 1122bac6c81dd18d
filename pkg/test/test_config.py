import json
import math

import pytest

from truncgeo.config import ConfigManager, model_from_config, validate_config
from truncgeo.exceptions import ConfigError
from truncgeo.models import ParamPoint, get_model, psi_value

EXP_MODEL = {"d": 1, "statistics": "-x", "base": "0", "theta_lower": [0.0]}


@pytest.fixture
def config_file(tmp_path):
    def write(data, name="config.json"):
        path = tmp_path / name
        if name.endswith(".toml"):
            path.write_text(data)
        else:
            path.write_text(json.dumps(data))
        return path

    return write


class TestValidation:
    @pytest.mark.parametrize(
        "data",
        [
            {"modles": {}},
            {"models": {"m": {"d": 1, "statistics": "x"}}},
            {"models": {"m": {**EXP_MODEL, "colour": "red"}}},
            {"priors": {"p": 3}},
            {"experiments": {"e": {"model": "trunc_exp", "reps": 10}}},
            {"quadrature": {"tolerance": 1e-8}},
            {"grid": {"width": 3}},
            {"cache": {"enabled": True, "size": 3}},
            {"threads": 0},
            {"threads": "four"},
        ],
    )
    def test_rejected(self, data):
        with pytest.raises(ConfigError):
            validate_config(data)

    def test_accepted(self):
        validate_config(
            {
                "models": {"m": EXP_MODEL},
                "priors": {"inverse": "1/theta"},
                "quadrature": {"rel_tol": 1e-8},
                "grid": {"order": 6},
                "threads": 2,
                "cache": {"enabled": False},
            }
        )


class TestConfigManager:
    def test_missing_default_file_is_empty(self):
        assert ConfigManager.all() == {}
        assert not ConfigManager.path().exists()

    def test_custom_json(self, config_file):
        ConfigManager.custom_config(config_file({"priors": {"inverse": "1/theta"}, "grid": {"order": 4}}))
        assert ConfigManager.named_priors() == {"inverse": "1/theta"}
        assert ConfigManager.grid_config().order == 4

    def test_custom_toml(self, config_file):
        text = '[quadrature]\nrel_tol = 1e-7\n\n[experiments.small]\nmodel = "trunc_exp"\nreplications = 100\n'
        ConfigManager.custom_config(config_file(text, "config.toml"))
        assert ConfigManager.quadrature_config().rel_tol == 1e-7
        assert ConfigManager.experiment("small")["replications"] == 100

    def test_missing_custom_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigManager.custom_config(tmp_path / "absent.json")

    def test_unparsable_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{")
        with pytest.raises(ConfigError):
            ConfigManager.custom_config(path)

    def test_unknown_experiment(self):
        with pytest.raises(ConfigError):
            ConfigManager.experiment("nothing")

    def test_get_set_delete(self, monkeypatch):
        ConfigManager.set("threads", 3)
        assert ConfigManager.get("threads") == 3
        with pytest.raises(ConfigError):
            ConfigManager.set("colour", "red")
        ConfigManager.delete("threads")
        monkeypatch.setenv("threads", "5")
        assert ConfigManager.get("threads") == "5"
        ConfigManager.clear()
        assert ConfigManager.get("absent", "fallback") == "fallback"

    def test_cache_defaults(self):
        assert ConfigManager.cache_settings() == {"enabled": True, "path": None}

    def test_bad_quadrature_values(self):
        ConfigManager.set("quadrature", {"rel_tol": -1.0})
        with pytest.raises(ConfigError):
            ConfigManager.quadrature_config()


class TestWorkerCount:
    def test_command_line_default(self):
        assert ConfigManager.worker_count() == 4
        assert ConfigManager.worker_count(2) == 2

    def test_config_beats_command_line(self):
        ConfigManager.set("threads", 3)
        assert ConfigManager.worker_count(2) == 3

    def test_environment_beats_config(self, monkeypatch):
        ConfigManager.set("threads", 3)
        monkeypatch.setenv("TRUNCGEO_THREADS", "6")
        assert ConfigManager.worker_count(2) == 6

    @pytest.mark.parametrize("raw", ["zero", "0"])
    def test_bad_environment(self, monkeypatch, raw):
        monkeypatch.setenv("TRUNCGEO_THREADS", raw)
        with pytest.raises(ConfigError):
            ConfigManager.worker_count()


class TestUserModels:
    def test_generic_exponential(self):
        model = model_from_config("cfg_exp", EXP_MODEL)
        p = ParamPoint.of([2.0], 0.5)
        assert model.is_otef
        assert psi_value(model, p) == pytest.approx(-1.0 - math.log(2.0), rel=1e-9)

    def test_closed_form_psi(self):
        entry = {**EXP_MODEL, "psi": "-theta * gamma - log(theta)"}
        model = model_from_config("cfg_exp_psi", entry)
        assert psi_value(model, ParamPoint.of([2.0], 0.5)) == pytest.approx(-1.0 - math.log(2.0))

    def test_statistics_count_must_match_d(self):
        with pytest.raises(ConfigError):
            model_from_config("cfg_bad", {**EXP_MODEL, "d": 2})

    def test_source_tracks_the_definition(self):
        first = model_from_config("cfg_exp", EXP_MODEL)
        changed = model_from_config("cfg_exp", {**EXP_MODEL, "theta_upper": [50.0]})
        assert json.loads(first.source) == EXP_MODEL
        assert changed.source != first.source
        assert get_model("trunc_exp").source == ""

    def test_registration(self, config_file):
        ConfigManager.custom_config(config_file({"models": {"cfg_registered": EXP_MODEL}}))
        assert ConfigManager.register_models() == ["cfg_registered"]
        assert get_model("cfg_registered").d == 1
        assert ConfigManager.model("cfg_registered").name == "cfg_registered"

    def test_builtin_names_are_reserved(self, config_file):
        ConfigManager.custom_config(config_file({"models": {"trunc_exp": EXP_MODEL}}))
        with pytest.raises(ConfigError):
            ConfigManager.register_models()
