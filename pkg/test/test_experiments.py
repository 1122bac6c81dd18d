import json

import numpy as np
import pytest

from truncgeo import experiments
from truncgeo.config import model_from_config
from truncgeo.exceptions import ConfigError
from truncgeo.experiments import (
    SCHEMA_VERSION,
    CoverageReport,
    ExperimentConfig,
    MomentReport,
    binomial_se,
    decay_slope,
    expansion_rate,
    replication_seed,
    run_consistency,
    run_coverage,
    run_moment,
    run_pivot_law,
    write_report,
)
from truncgeo.models import ParamPoint
from truncgeo.priors import resolve_prior


def exp_config(**changes):
    base = dict(
        model="trunc_exp",
        true_point={"theta": [2.0], "gamma": 0.0},
        priors=["1/theta"],
        n_values=[20],
        replications=100,
        levels=[0.5, 0.9],
        master_seed=7,
    )
    base.update(changes)
    return ExperimentConfig.from_dict(base)


class TestConfig:
    def test_from_dict(self):
        cfg = exp_config(grid={"order": 6})
        assert cfg.true_point == ParamPoint.of([2.0], 0.0)
        assert cfg.n_values == (20,) and cfg.levels == (0.5, 0.9)
        assert cfg.grid.order == 6

    def test_vector_true_point(self):
        assert exp_config(true_point=[2.0, 0.0]).true_point == ParamPoint.of([2.0], 0.0)

    @pytest.mark.parametrize(
        "changes",
        [
            dict(replications=99),
            dict(n_values=[]),
            dict(levels=[1.0]),
            dict(master_seed=-1),
            dict(pivot="V"),
            dict(worker_count=0),
            dict(true_point={"theta": [2.0]}),
            dict(seed=3),
        ],
    )
    def test_rejected(self, changes):
        with pytest.raises(ConfigError):
            exp_config(**changes)

    def test_worker_count_is_not_echoed(self):
        cfg = exp_config(worker_count=3)
        assert "worker_count" not in cfg.to_dict()
        assert cfg.with_overrides(worker_count=None, replications=200).replications == 200

    def test_sample_sizes_below_d_plus_one(self):
        with pytest.raises(ConfigError):
            run_coverage(exp_config(n_values=[1]), progress=False, use_cache=False)

    def test_coverage_needs_a_prior(self):
        with pytest.raises(ConfigError):
            run_coverage(exp_config(priors=[]), progress=False, use_cache=False)


def test_replication_seeds_are_independent_of_order():
    first = np.random.default_rng(replication_seed(7, 20, 0, 5)).random()
    again = np.random.default_rng(replication_seed(7, 20, 0, 5)).random()
    other = np.random.default_rng(replication_seed(7, 20, 1, 5)).random()
    assert first == again != other


class TestStatistics:
    def test_binomial_se(self):
        assert binomial_se(0.9, 100) == pytest.approx(0.03)

    def test_decay_slope_of_a_power_law(self):
        n = [50, 100, 200, 400]
        result = decay_slope(n, [3.0 * m**-1.5 for m in n])
        assert result["slope"] == pytest.approx(-1.5)
        assert result["ci_low"] == pytest.approx(-1.5) and result["ci_high"] == pytest.approx(-1.5)

    def test_decay_slope_needs_two_points(self):
        result = decay_slope([50, 100], [None, 0.1])
        assert result["slope"] is None and result["points"] == 1


class TestCoverage:
    def test_determinism_across_worker_counts(self, tmp_path):
        paths = []
        for workers in (1, 4):
            report = run_coverage(exp_config(worker_count=workers), progress=False, use_cache=False)
            paths.append(write_report(report, tmp_path / f"cov{workers}.json"))
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_cells_and_csv(self, tmp_path):
        report = run_coverage(exp_config(), progress=False, use_cache=False)
        assert [c["level"] for c in report.cells] == [0.5, 0.9]
        for cell in report.cells:
            assert cell["effective"] + cell["degenerate"] == 100
            assert 0.0 <= cell["estimate"] <= 1.0
        path = write_report(report, tmp_path / "cov.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == f"# schema_version: {SCHEMA_VERSION}"
        body = [line for line in lines if not line.startswith("#")]
        assert body[0] == ",".join(CoverageReport.columns)
        assert len(body) == 3

    def test_json_schema(self, tmp_path):
        report = run_coverage(exp_config(), progress=False, use_cache=False)
        data = json.loads(write_report(report, tmp_path / "cov.json").read_text())
        assert data["schema_version"] == SCHEMA_VERSION
        assert data["kind"] == "coverage"
        assert data["config"]["priors"] == ["1/theta"]
        assert len(data["cells"]) == 2

    def test_cache_replays_cells(self, test_db, tmp_path, monkeypatch):
        cfg = exp_config()
        first = write_report(run_coverage(cfg, progress=False), tmp_path / "first.json")

        def recompute(*args):
            raise AssertionError("cell was recomputed")

        monkeypatch.setattr(experiments, "_coverage_cells", recompute)
        second = write_report(run_coverage(cfg, progress=False), tmp_path / "second.json")
        assert first.read_bytes() == second.read_bytes()

    def test_redefined_named_prior_is_not_replayed(self, test_db, monkeypatch):
        cfg = exp_config(priors=["p"])
        calls = []
        compute = experiments._coverage_cells

        def counting(cell, *args):
            calls.append(cell.prior.definition)
            return compute(cell, *args)

        monkeypatch.setattr(experiments, "_coverage_cells", counting)
        run_coverage(cfg, {"p": "1/theta"}, progress=False)
        redefined = run_coverage(cfg, {"p": "theta**3"}, progress=False)
        run_coverage(cfg, {"p": "theta**3"}, progress=False)
        assert calls == ["1/theta", "theta**3"]
        fresh = run_coverage(cfg, {"p": "theta**3"}, progress=False, use_cache=False)
        assert redefined.cells == fresh.cells

    def test_cell_identity_carries_definitions(self, texp):
        cfg = exp_config(priors=["p"])
        user = model_from_config("cfg_exp", {"d": 1, "statistics": "-x", "base": "0", "theta_lower": [0.0]})
        prior = resolve_prior(texp, "p", {"p": "1/theta"})
        builtin = experiments._Cell(cfg, texp, prior, "p", 0, 20).identity("moment")
        configured = experiments._Cell(cfg, user, prior, "p", 0, 20).identity("moment")
        assert builtin["prior_definition"] == "1/theta"
        assert builtin["model_source"] == ""
        assert json.loads(configured["model_source"])["statistics"] == "-x"

    def test_unknown_format(self, tmp_path):
        report = CoverageReport(config={}, d=1)
        with pytest.raises(ConfigError):
            write_report(report, tmp_path / "cov.txt")


def test_all_degenerate_cells_serialize(tmp_path):
    report = MomentReport(config={"model": "trunc_exp"}, d=1)
    report.cells.append(
        {
            "prior": "1",
            "n": 20,
            "estimate": None,
            "se": None,
            "gap_mean": None,
            "gap_se": None,
            "theta_scaled_mean": [None],
            "theta_scaled_se": [None],
            "effective": 0,
            "degenerate": 100,
            "valid": False,
        }
    )
    assert report.header()[6:8] == ["theta_scaled_mean_1", "theta_scaled_se_1"]
    assert report.rows()[0][2] == ""
    data = json.loads(write_report(report, tmp_path / "m.json").read_text())
    assert data["cells"][0]["estimate"] is None
    assert write_report(report, tmp_path / "m.csv").exists()


def test_moment_report(tmp_path):
    report = run_moment(exp_config(priors=["1", "theta"]), progress=False, use_cache=False)
    assert [c["prior"] for c in report.cells] == ["1", "theta"]
    assert report.summary["1"]["gamma_limit"] == pytest.approx(-0.5, rel=1e-6)
    assert report.summary["theta"]["gamma_limit"] == pytest.approx(0.0, abs=1e-8)
    assert report.summary["1"]["theta_limit"][0] == pytest.approx(0.0, abs=1e-7)
    assert report.header()[:4] == ["prior", "n", "estimate", "se"]


def test_pivot_law_report():
    report = run_pivot_law(exp_config(n_values=[50], replications=200), progress=False, use_cache=False)
    names = [c["pivot"] for c in report.cells]
    assert names == ["T", "U1"]
    # T is exactly exponential for every n when theta is known; with theta_hat it is close
    assert report.cells[0]["pvalue"] > 1e-4


def test_consistency_report():
    report = run_consistency(exp_config(n_values=[40], replications=100), progress=False, use_cache=False)
    cell = report.cells[0]
    assert cell["valid"]
    assert cell["gamma_error_4n"] < cell["gamma_error"]
    assert cell["theta_error_4n"] < cell["theta_error"]


def test_expansion_rate_report():
    report = expansion_rate(exp_config(n_values=[40]), progress=False, use_cache=False)
    orders = [c["order"] for c in report.cells]
    assert orders == [0, 1]
    assert report.cells[1]["estimate"] < report.cells[0]["estimate"]
    assert set(report.summary["1/theta"]) == {"0", "1"}


# Acceptance runs at full replication counts. Expected values come from the
# large-sample theory; the margins are three binomial or Monte Carlo SEs.


@pytest.mark.slow
def test_matching_prior_covers_at_nominal_level():
    cfg = exp_config(n_values=[50], replications=2000, levels=[0.05, 0.5, 0.95], worker_count=4)
    report = run_coverage(cfg, progress=False, use_cache=False)
    for cell in report.cells:
        assert abs(cell["estimate"] - cell["level"]) < 3 * cell["se"] + 0.01


@pytest.mark.slow
def test_consistency_rates():
    cfg = exp_config(n_values=[100], replications=2000, worker_count=4)
    cell = run_consistency(cfg, progress=False, use_cache=False).cells[0]
    assert cell["theta_ratio"] == pytest.approx(2.0, abs=0.3)
    assert cell["gamma_ratio"] == pytest.approx(4.0, abs=0.6)


@pytest.mark.slow
def test_moment_gap_decays_like_n_cubed():
    cfg = exp_config(priors=["1"], n_values=[50, 100, 200, 400], replications=1000, worker_count=4)
    report = run_moment(cfg, progress=False, use_cache=False)
    decay = report.summary["1"]["decay"]
    assert decay["slope"] == pytest.approx(-2.0, abs=0.5)
    last = report.cells[-1]
    assert last["estimate"] == pytest.approx(-0.5, abs=3 * last["se"] + 0.1)


@pytest.mark.slow
def test_pivots_follow_their_limit_laws():
    cfg = exp_config(priors=[], n_values=[500], replications=10000, worker_count=4)
    report = run_pivot_law(cfg, progress=False, use_cache=False)
    assert {c["pivot"]: c["estimate"] < 0.02 for c in report.cells} == {"T": True, "U1": True}


@pytest.mark.slow
def test_coverage_separates_matching_and_flat_priors():
    cfg = exp_config(priors=["1/theta", "1"], n_values=[30], replications=20000, levels=[0.9], worker_count=4)
    cells = {c["prior"]: c for c in run_coverage(cfg, progress=False, use_cache=False).cells}
    matching, flat = cells["1/theta"], cells["1"]
    assert abs(matching["estimate"] - 0.9) < 3 * matching["se"]
    assert abs(flat["estimate"] - 0.9) > abs(matching["estimate"] - 0.9)


@pytest.mark.slow
def test_moment_matching_prior_removes_the_leading_gap():
    cfg = exp_config(priors=["theta", "1"], n_values=[20, 40, 80], replications=2000, worker_count=4)
    report = run_moment(cfg, progress=False, use_cache=False)
    by_n = {}
    for cell in report.cells:
        by_n.setdefault(cell["n"], {})[cell["prior"]] = cell["estimate"]
    for estimates in by_n.values():
        assert abs(estimates["theta"]) < abs(estimates["1"]) / 3
