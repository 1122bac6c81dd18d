#!/usr/bin/env python3
"""Geometry, matching-prior checks and Monte Carlo experiments for
one-sided truncated families.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import re
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from truncgeo import __version__, log
from truncgeo.cache import init_db
from truncgeo.config import ConfigManager
from truncgeo.exceptions import ConfigError, TruncGeoError
from truncgeo.experiments import RUNNERS, ExperimentConfig, write_report
from truncgeo.export import metadata, write_json
from truncgeo.expression import theta_names
from truncgeo.geometry import (
    DEFAULT_STEP,
    geometry_at,
    trace_streamline,
    write_geometry_json,
    write_streamline_csv,
)
from truncgeo.inference import (
    Pivot,
    fit_mle,
    pivot_cdf,
    posterior_grid,
    posterior_means,
    write_posterior_json,
)
from truncgeo.models import ModelSpec, ParamPoint, Sample, draw_sample
from truncgeo.priors import residual_grid, resolve_prior, write_residual_csv

logger = logging.getLogger(__name__)

EXPERIMENTS = {
    "coverage": "coverage",
    "moment": "moment",
    "pivot-law": "pivot_law",
    "consistency": "consistency",
    "expansion-rate": "expansion_rate",
}


def _add_model(parser: argparse.ArgumentParser, required=True) -> None:
    parser.add_argument(
        "--model",
        "-m",
        required=required,
        help="Built-in model (trunc_exp, trunc_normal_natural, trunc_normal_meansd, "
        "trunc_normal_unit) or one defined in the config file.",
    )


def _add_output(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--output",
        "-o",
        default="-",
        help="Output file; '-' (the default) writes to standard output.",
    )


def _add_sample(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--sample", type=str, help="File of observations, whitespace or comma separated.")
    group.add_argument("--draw", type=int, metavar="N", help="Draw N observations at --true-point.")
    parser.add_argument("--true-point", type=str, help="Point such as theta=2,gamma=0 for --draw.")
    parser.add_argument("--seed", type=int, default=0, help="Seed for --draw.")


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="truncgeo", description=__doc__, add_help=True)
    parser.add_argument(
        "--version",
        "-v",
        action="version",
        version=f"truncgeo v{__version__}",
    )
    parser.add_argument(
        "--debug",
        "-d",
        default=False,
        action="store_true",
        help="Use debug logging level.",
    )
    parser.add_argument(
        "--quiet",
        "-q",
        default=False,
        action="store_true",
        help="Only log warnings and hide progress bars.",
    )
    parser.add_argument(
        "--threads",
        "-t",
        type=int,
        default=None,
        help="Worker threads for experiments (TRUNCGEO_THREADS and the config file take precedence).",
    )
    parser.add_argument(
        "--config",
        type=str,
        help="Config file (.json or .toml) with models, priors and experiments.",
    )
    parser.add_argument(
        "--ignore-cache",
        default=False,
        action="store_true",
        help="Recompute experiment cells instead of reading the cache.",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")

    geometry = subparsers.add_parser("geometry", help="Metric, connections and A-tensors at a point.")
    _add_model(geometry)
    geometry.add_argument("--point", required=True, help="For example theta=2,gamma=0.")
    geometry.add_argument("--alphas", default="0,1", help="Comma-separated alpha values.")
    _add_output(geometry)
    geometry.set_defaults(handler=run_geometry)

    residual = subparsers.add_parser("residual", help="Matching-condition residuals over a grid.")
    _add_model(residual)
    residual.add_argument("--prior", required=True, help="Built-in tag, config prior name or expression.")
    residual.add_argument(
        "--cond",
        required=True,
        help="pm_gamma, pm_theta<i>, mm_gamma, mm_theta<i>, pm_gamma_lie or mm_gamma_lie.",
    )
    residual.add_argument("--grid", required=True, help="For example theta=0.5:5:10,gamma=-1:1:5.")
    _add_output(residual)
    residual.set_defaults(handler=run_residual)

    streamline = subparsers.add_parser("streamline", help="Trace an integral curve of chi.")
    _add_model(streamline)
    streamline.add_argument("--start", required=True, help="For example theta=1,gamma=0.")
    streamline.add_argument("--smax", type=float, required=True, help="Curve parameter to stop at.")
    streamline.add_argument("--step", type=float, default=DEFAULT_STEP, help="RK4 step.")
    _add_output(streamline)
    streamline.set_defaults(handler=run_streamline)

    mle = subparsers.add_parser("mle", help="Maximum likelihood fit of a sample.")
    _add_model(mle)
    _add_sample(mle)
    _add_output(mle)
    mle.set_defaults(handler=run_mle)

    posterior = subparsers.add_parser("posterior", help="Grid posterior of a sample.")
    _add_model(posterior)
    _add_sample(posterior)
    posterior.add_argument("--prior", required=True, help="Built-in tag, config prior name or expression.")
    posterior.add_argument("--pivot", default="T", help="Pivot for --z: T or U<i>.")
    posterior.add_argument("--z", type=float, action="append", default=[], help="Posterior CDF of the pivot at z.")
    posterior.add_argument("--full", action="store_true", help="Write the whole grid, not a summary.")
    _add_output(posterior)
    posterior.set_defaults(handler=run_posterior)

    for command in EXPERIMENTS:
        experiment = subparsers.add_parser(command, help=f"Run the {command} experiment.")
        experiment.add_argument("--experiment", "-e", help="Experiment name in the config file.")
        _add_model(experiment, required=False)
        experiment.add_argument("--true-point", help="For example theta=2,gamma=0.")
        experiment.add_argument(
            "--prior",
            dest="priors",
            action="append",
            help="Prior tag, config prior name or expression; repeat for several.",
        )
        experiment.add_argument("--n", dest="n_values", help="Comma-separated sample sizes.")
        experiment.add_argument("--replications", "-r", type=int)
        experiment.add_argument("--levels", help="Comma-separated nominal levels.")
        experiment.add_argument("--pivot", help="T or U<i>.")
        experiment.add_argument("--seed", dest="master_seed", type=int)
        experiment.add_argument("--format", choices=("json", "csv"), help="Defaults to the file suffix.")
        _add_output(experiment)
        experiment.set_defaults(handler=run_experiment, experiment_kind=EXPERIMENTS[command])

    return parser


def parse_args(args: Optional[List[str]]) -> argparse.Namespace:
    return create_parser().parse_args(args=args)


def parse_point(text: str, model: ModelSpec) -> ParamPoint:
    """'theta=2,gamma=0' (or the model's own parameter names) to a point."""
    names = theta_names(model.d, model.param_names)
    theta = [None] * model.d
    gamma = None
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, _, value = item.partition("=")
        key = key.strip()
        try:
            number = float(value)
        except ValueError as e:
            raise ConfigError(f"bad value in point {text!r}: {item!r}") from e
        if key == "gamma":
            gamma = number
        elif key in names:
            theta[names[key]] = number
        else:
            raise ConfigError(f"unknown coordinate {key!r}; expected {sorted(names)} and gamma")
    if gamma is None or any(t is None for t in theta):
        raise ConfigError(f"point {text!r} must set every coordinate of {model.name}")
    return ParamPoint.of(theta, gamma)


def _parse_axis(item: str) -> np.ndarray:
    key, _, spec = item.partition("=")
    parts = spec.split(":")
    try:
        if len(parts) == 1:
            return np.array([float(parts[0])])
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    except (ValueError, IndexError) as e:
        raise ConfigError(f"bad grid axis {item!r}; use name=lo:hi:count") from e
    if count < 1:
        raise ConfigError(f"grid axis {item!r} needs a positive count")
    return np.linspace(lo, hi, count)


def parse_grid(text: str, model: ModelSpec) -> list[ParamPoint]:
    """'theta=0.5:5:10,gamma=-1:1:5' to the points of the product grid."""
    names = theta_names(model.d, model.param_names)
    axes: list = [None] * (model.d + 1)
    for item in filter(None, (s.strip() for s in text.split(","))):
        key = item.partition("=")[0].strip()
        index = model.d if key == "gamma" else names.get(key)
        if index is None:
            raise ConfigError(f"unknown grid coordinate {key!r}")
        axes[index] = _parse_axis(item)
    if any(a is None for a in axes):
        raise ConfigError(f"grid {text!r} must cover every coordinate of {model.name}")
    return [ParamPoint.from_vector(v) for v in itertools.product(*axes)]


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from e


def _load_sample(parsed_args, model: ModelSpec) -> Sample:
    if parsed_args.sample:
        path = Path(parsed_args.sample)
        if not path.exists():
            raise ConfigError(f"sample file {path} not found")
        tokens = re.split(r"[\s,]+", path.read_text(encoding="utf-8").strip())
        return Sample.from_values(_floats(",".join(tokens)))
    if not parsed_args.true_point:
        raise ConfigError("--draw needs --true-point")
    truth = parse_point(parsed_args.true_point, model)
    return draw_sample(model, truth, parsed_args.draw, parsed_args.seed)


def _resolved(parsed_args) -> dict:
    """Echo of the options for the metadata block of emitted files."""
    skip = ("handler", "debug", "quiet", "ignore_cache")
    out = {k: v for k, v in vars(parsed_args).items() if k not in skip}
    out["quadrature"] = vars(ConfigManager.quadrature_config())
    return out


def run_geometry(parsed_args) -> int:
    model = ConfigManager.model(parsed_args.model)
    point = parse_point(parsed_args.point, model)
    geo = geometry_at(model, point, _floats(parsed_args.alphas), ConfigManager.quadrature_config())
    write_geometry_json(geo, parsed_args.output, _resolved(parsed_args))
    return 0


def run_residual(parsed_args) -> int:
    model = ConfigManager.model(parsed_args.model)
    cfg = ConfigManager.quadrature_config()
    prior = resolve_prior(model, parsed_args.prior, ConfigManager.named_priors(), cfg)
    points = parse_grid(parsed_args.grid, model)
    header, rows = residual_grid(model, prior, parsed_args.cond, points, cfg)
    write_residual_csv(header, rows, parsed_args.output, _resolved(parsed_args))
    worst = max(abs(row[-1]) for row in rows)
    logger.info(f"{len(rows)} residuals of {parsed_args.cond}, largest |residual| {worst:.3g}")
    return 0


def run_streamline(parsed_args) -> int:
    model = ConfigManager.model(parsed_args.model)
    start = parse_point(parsed_args.start, model)
    line = trace_streamline(model, start, parsed_args.smax, parsed_args.step, ConfigManager.quadrature_config())
    write_streamline_csv(line, model, parsed_args.output, _resolved(parsed_args))
    if line.status != "complete":
        logger.warning(f"streamline stopped early ({line.status}) at {line.final}")
    return 0


def run_mle(parsed_args) -> int:
    model = ConfigManager.model(parsed_args.model)
    mle = fit_mle(model, _load_sample(parsed_args, model))
    write_json({"metadata": metadata(_resolved(parsed_args)), "mle": mle.to_dict()}, parsed_args.output)
    return 0


def run_posterior(parsed_args) -> int:
    model = ConfigManager.model(parsed_args.model)
    sample = _load_sample(parsed_args, model)
    prior = resolve_prior(model, parsed_args.prior, ConfigManager.named_priors())
    post = posterior_grid(model, sample, prior, ConfigManager.grid_config())
    if parsed_args.full:
        write_posterior_json(post, parsed_args.output, _resolved(parsed_args))
        return 0
    theta_bar, gamma_bar = posterior_means(post)
    pivot = Pivot.parse(parsed_args.pivot)
    cdf = []
    for z in parsed_args.z:
        prob, clamped = pivot_cdf(post, pivot, z)
        cdf.append({"z": z, "probability": prob, "clamped": clamped})
    summary = {
        "mle": post.mle.to_dict(),
        "theta_mean": theta_bar,
        "gamma_mean": gamma_bar,
        "log_normalizer": post.log_Z,
        "pivot": str(pivot),
        "cdf": cdf,
    }
    write_json({"metadata": metadata(_resolved(parsed_args)), "posterior": summary}, parsed_args.output)
    return 0


def experiment_config(parsed_args) -> ExperimentConfig:
    """Experiment from the config file, overridden by command-line options."""
    data = ConfigManager.experiment(parsed_args.experiment) if parsed_args.experiment else {}
    if parsed_args.model:
        data["model"] = parsed_args.model
    if parsed_args.true_point:
        if "model" not in data:
            raise ConfigError("--true-point needs --model")
        data["true_point"] = parse_point(parsed_args.true_point, ConfigManager.model(data["model"]))
    if parsed_args.priors:
        data["priors"] = parsed_args.priors
    if parsed_args.n_values:
        data["n_values"] = [int(n) for n in _floats(parsed_args.n_values)]
    if parsed_args.levels:
        data["levels"] = _floats(parsed_args.levels)
    for key in ("replications", "pivot", "master_seed"):
        if getattr(parsed_args, key) is not None:
            data[key] = getattr(parsed_args, key)
    data.setdefault("grid", ConfigManager.grid_config())
    data["worker_count"] = ConfigManager.worker_count(parsed_args.threads)
    return ExperimentConfig.from_dict(data)


def run_experiment(parsed_args) -> int:
    cfg = experiment_config(parsed_args)
    use_cache = not parsed_args.ignore_cache and ConfigManager.cache_settings()["enabled"]
    if use_cache:
        init_db(path=ConfigManager.cache_settings()["path"])
    kind = parsed_args.experiment_kind
    runner = RUNNERS[kind]
    options = {"progress": not parsed_args.quiet, "use_cache": use_cache}
    if kind in ("coverage", "moment", "expansion_rate"):
        options["named_priors"] = ConfigManager.named_priors()
    report = runner(cfg, **options)
    write_report(report, parsed_args.output, parsed_args.format)
    invalid = sum(not cell["valid"] for cell in report.cells)
    if invalid:
        logger.warning(f"{invalid} of {len(report.cells)} cells had only degenerate replications")
    return 0


def main(args: Optional[List[str]] = None) -> int:
    from rich.console import Console
    from rich.logging import RichHandler

    # stdout carries the emitted artifacts
    logging.basicConfig(level=logging.INFO, handlers=[RichHandler(console=Console(stderr=True))])

    try:
        parsed_args = parse_args(args)
    except SystemExit as e:
        return int(e.code or 0)

    if parsed_args.command is None:
        create_parser().print_usage(sys.stderr)
        return 2

    if parsed_args.debug:
        log.setLevel(logging.DEBUG)
    elif parsed_args.quiet:
        log.setLevel(logging.WARNING)

    try:
        if parsed_args.config:
            ConfigManager.custom_config(parsed_args.config)
        ConfigManager.register_models()
        return parsed_args.handler(parsed_args)
    except ConfigError as e:
        logger.error(str(e))
        return 2
    except TruncGeoError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
