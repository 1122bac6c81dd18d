import csv
import io
import json

import pytest

from truncgeo import __version__
from truncgeo.cli import main, parse_grid, parse_point
from truncgeo.exceptions import ConfigError
from truncgeo.models import ParamPoint, get_model


def csv_body(text):
    lines = [line for line in text.splitlines() if not line.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


class TestParsing:
    def test_point_by_parameter_names(self):
        model = get_model("trunc_normal_natural")
        assert parse_point("alpha=1, beta=-0.5, gamma=0.2", model) == ParamPoint.of([1.0, -0.5], 0.2)
        assert parse_point("theta_2=-0.5,theta1=1,gamma=0.2", model) == ParamPoint.of([1.0, -0.5], 0.2)

    @pytest.mark.parametrize("text", ["theta=2", "theta=2,gamma=x", "theta=2,gamma=0,delta=1"])
    def test_bad_points(self, text):
        with pytest.raises(ConfigError):
            parse_point(text, get_model("trunc_exp"))

    def test_grid(self):
        points = parse_grid("theta=1:2:3,gamma=0", get_model("trunc_exp"))
        assert [p.theta[0] for p in points] == [1.0, 1.5, 2.0]
        assert {p.gamma for p in points} == {0.0}

    @pytest.mark.parametrize("text", ["theta=1:2", "theta=1:2:0,gamma=0", "gamma=0", "mu=1,gamma=0"])
    def test_bad_grids(self, text):
        with pytest.raises(ConfigError):
            parse_grid(text, get_model("trunc_exp"))


class TestExitCodes:
    def test_no_command_prints_usage(self, capsys):
        assert main([]) == 2
        assert "usage" in capsys.readouterr().err

    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert __version__ in capsys.readouterr().out

    def test_argparse_errors(self):
        assert main(["geometry"]) == 2

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"colour": "red"}))
        assert main(["--config", str(path), "geometry", "--model", "trunc_exp", "--point", "theta=2,gamma=0"]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["--config", str(tmp_path / "none.json"), "geometry", "-m", "trunc_exp", "--point", "theta=1,gamma=0"]) == 2

    def test_unknown_model(self):
        assert main(["geometry", "--model", "gamma_family", "--point", "theta=2,gamma=0"]) == 1

    def test_outside_the_parameter_space(self):
        assert main(["geometry", "--model", "trunc_exp", "--point", "theta=-1,gamma=0"]) == 1

    def test_small_replication_count(self):
        args = ["--ignore-cache", "coverage", "-m", "trunc_exp", "--true-point", "theta=2,gamma=0"]
        assert main([*args, "--prior", "1/theta", "--replications", "10"]) == 2


class TestCommands:
    def test_geometry(self, capsys):
        assert main(["geometry", "--model", "trunc_exp", "--point", "theta=2,gamma=0"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["geometry"]["g_gammagamma"] == pytest.approx(4.0)
        assert data["metadata"]["tool"] == "truncgeo"

    def test_residual_of_a_matching_prior(self, capsys):
        args = ["residual", "--model", "trunc_exp", "--prior", "alpha_parallel(-1)", "--cond", "pm_gamma"]
        assert main([*args, "--grid", "theta=0.5:5:4,gamma=-1:1:2"]) == 0
        rows = csv_body(capsys.readouterr().out)
        assert len(rows) == 8
        assert max(abs(float(r["residual"])) for r in rows) < 1e-6

    def test_residual_with_a_config_prior(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"priors": {"inverse": "1/theta"}}))
        output = tmp_path / "res.csv"
        args = ["--config", str(path), "residual", "-m", "trunc_exp", "--prior", "inverse", "--cond", "pm_theta1"]
        assert main([*args, "--grid", "theta=1:3:3,gamma=0", "--output", str(output)]) == 0
        rows = csv_body(output.read_text())
        assert max(abs(float(r["residual"])) for r in rows) < 1e-6

    def test_streamline(self, capsys):
        args = ["streamline", "--model", "trunc_exp", "--start", "theta=1,gamma=0"]
        assert main([*args, "--smax", "0.5", "--step", "0.01"]) == 0
        rows = csv_body(capsys.readouterr().out)
        assert float(rows[-1]["theta_1"]) == pytest.approx(2.0, rel=1e-6)
        assert rows[-1]["status"] == "complete"

    def test_mle_from_file(self, tmp_path, capsys):
        sample = tmp_path / "x.txt"
        sample.write_text("1.0 1.5\n2.0, 3.5\n")
        assert main(["mle", "--model", "trunc_exp", "--sample", str(sample)]) == 0
        mle = json.loads(capsys.readouterr().out)["mle"]
        assert mle["gamma_hat"] == 1.0
        assert mle["theta_hat"][0] == pytest.approx(1.0 / (2.0 - 1.0))

    def test_draw_needs_a_true_point(self):
        assert main(["mle", "--model", "trunc_exp", "--draw", "50"]) == 2

    def test_posterior_summary(self, capsys):
        args = ["posterior", "-m", "trunc_exp", "--draw", "100", "--true-point", "theta=2,gamma=0"]
        assert main([*args, "--prior", "1/theta", "--z", "-1", "--z", "-100"]) == 0
        summary = json.loads(capsys.readouterr().out)["posterior"]
        assert 0.0 < summary["cdf"][0]["probability"] < 1.0
        assert summary["cdf"][1] == {"z": -100.0, "probability": 0.0, "clamped": True}

    def test_pivot_law_experiment(self, tmp_path):
        output = tmp_path / "law.csv"
        args = ["-q", "--threads", "2", "--ignore-cache", "pivot-law", "-m", "trunc_exp"]
        args += ["--true-point", "theta=2,gamma=0", "--n", "20", "-r", "100", "--output", str(output)]
        assert main(args) == 0
        rows = csv_body(output.read_text())
        assert [r["pivot"] for r in rows] == ["T", "U1"]

    def test_experiment_from_config(self, tmp_path):
        path = tmp_path / "config.toml"
        path.write_text(
            "[experiments.small]\n"
            'model = "trunc_exp"\n'
            "true_point = { theta = [2.0], gamma = 0.0 }\n"
            'priors = ["1/theta"]\n'
            "n_values = [20]\n"
            "replications = 100\n"
        )
        output = tmp_path / "cov.json"
        args = ["-q", "--config", str(path), "--ignore-cache", "coverage", "-e", "small", "--levels", "0.9"]
        assert main([*args, "--output", str(output)]) == 0
        data = json.loads(output.read_text())
        assert data["config"]["levels"] == [0.9]
        assert data["cells"][0]["effective"] + data["cells"][0]["degenerate"] == 100
