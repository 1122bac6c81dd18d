"""Monte Carlo checks of the matching properties.

Every replication draws its sample from a seed derived from
(master_seed, n, prior index, replication index), and results are reduced in
replication order, so reports do not depend on how many worker threads ran
them. Degenerate replications (c_hat <= 0, a non-positive-definite observed
information, a Newton fit that did not converge, an unusable posterior grid)
are counted and left out of every statistic.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import partial
from pathlib import Path
from typing import Callable, ClassVar, Mapping, Optional

import numpy as np
import tqdm
from scipy import stats as sp_stats

from truncgeo.cache import CellCache
from truncgeo.exceptions import (
    ConfigError,
    DegenerateFitError,
    GeometryError,
    PosteriorError,
    TruncGeoError,
)
from truncgeo.expansion import (
    ExpansionBox,
    expansion_gap,
    expansion_stats,
    gamma_moment_limit,
    theta_moment_limit,
)
from truncgeo.export import metadata, write_csv, write_json
from truncgeo.inference import (
    GridConfig,
    MleResult,
    Pivot,
    fit_mle,
    pivot_cdf,
    posterior_grid,
    posterior_means,
)
from truncgeo.models import ModelSpec, ParamPoint, Sample, draw_sample, get_model
from truncgeo.priors import PriorSpec, resolve_prior

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MIN_REPLICATIONS = 100
DEGENERATE = (DegenerateFitError, GeometryError, PosteriorError)


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    true_point: ParamPoint
    priors: tuple[str, ...] = ()
    n_values: tuple[int, ...] = (30,)
    replications: int = 1000
    levels: tuple[float, ...] = (0.9,)
    pivot: str = "T"
    master_seed: int = 0
    worker_count: int = 1
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        object.__setattr__(self, "priors", tuple(self.priors))
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        if self.replications < MIN_REPLICATIONS:
            raise ConfigError(
                f"replications must be at least {MIN_REPLICATIONS}, got {self.replications}"
            )
        if not self.n_values or min(self.n_values) < 1:
            raise ConfigError("n_values must be a non-empty list of positive sizes")
        if not all(0.0 < level < 1.0 for level in self.levels):
            raise ConfigError(f"levels must lie in (0, 1), got {list(self.levels)}")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be non-negative")
        if self.worker_count < 1:
            raise ConfigError("worker_count must be at least 1")
        Pivot.parse(self.pivot)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        if "model" not in data or "true_point" not in data:
            raise ConfigError("an experiment needs a model and a true_point")
        values = dict(data)
        point = values["true_point"]
        if isinstance(point, Mapping):
            if set(point) != {"theta", "gamma"}:
                raise ConfigError("true_point needs exactly the keys theta and gamma")
            values["true_point"] = ParamPoint.of(point["theta"], point["gamma"])
        elif not isinstance(point, ParamPoint):
            values["true_point"] = ParamPoint.from_vector(point)
        if isinstance(values.get("grid"), Mapping):
            values["grid"] = GridConfig.from_dict(values["grid"])
        return cls(**values)

    def to_dict(self) -> dict:
        """Echo of the configuration; the worker count does not change results."""
        return {
            "model": self.model,
            "true_point": self.true_point.to_dict(),
            "priors": list(self.priors),
            "n_values": list(self.n_values),
            "replications": self.replications,
            "levels": list(self.levels),
            "pivot": self.pivot,
            "master_seed": self.master_seed,
            "grid": asdict(self.grid),
        }

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def replication_seed(master_seed: int, n: int, prior_index: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, n, prior_index, rep])


@dataclass(frozen=True)
class _Cell:
    """One (prior, n) cell of an experiment; shared read-only by the workers."""

    cfg: ExperimentConfig
    model: ModelSpec
    prior: Optional[PriorSpec]
    label: str
    prior_index: int
    n: int

    @property
    def truth(self) -> ParamPoint:
        return self.cfg.true_point

    def sample(self, rep: int) -> Sample:
        seed = replication_seed(self.cfg.master_seed, self.n, self.prior_index, rep)
        return draw_sample(self.model, self.truth, self.n, seed)

    def identity(self, kind: str, **extra) -> dict:
        return {
            "kind": kind,
            "model": self.cfg.model,
            "model_source": self.model.source,
            "true_point": self.truth.to_dict(),
            "prior": self.label,
            "prior_definition": None if self.prior is None else self.prior.definition,
            "prior_index": self.prior_index,
            "n": self.n,
            "replications": self.cfg.replications,
            "master_seed": self.cfg.master_seed,
            "grid": asdict(self.cfg.grid),
            **extra,
        }


def _fit(cell: _Cell, rep: int) -> Optional[tuple[Sample, MleResult]]:
    sample = cell.sample(rep)
    try:
        mle = fit_mle(cell.model, sample)
    except DEGENERATE as e:
        logger.debug(f"replication {rep} of {cell.label} n={cell.n} is degenerate: {e}")
        return None
    if not mle.converged:
        logger.debug(f"replication {rep} of {cell.label} n={cell.n}: Newton did not converge")
        return None
    return sample, mle


def _run_replications(cell: _Cell, replicate: Callable, workers: int, progress: bool) -> list:
    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = list(
            tqdm.tqdm(
                executor.map(partial(replicate, cell), range(cell.cfg.replications)),
                total=cell.cfg.replications,
                desc=f"{cell.label} n={cell.n}",
                disable=not progress,
                leave=False,
            )
        )
    degenerate = sum(r is None for r in results)
    if degenerate:
        logger.info(f"{cell.label} n={cell.n}: {degenerate} of {len(results)} replications degenerate")
    return results


def _cached(kind: str, identity: dict, use_cache: bool, compute: Callable[[], dict]) -> dict:
    cache = CellCache(kind)
    if use_cache:
        hit = cache.get(identity)
        if hit is not None:
            return hit
    result = compute()
    if use_cache:
        cache.set(identity, result)
    return result


def _mean_se(values) -> tuple[Optional[float], Optional[float]]:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return None, None
    se = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else None
    return float(np.mean(values)), se


def binomial_se(p: float, count: int) -> float:
    return math.sqrt(p * (1.0 - p) / count)


def decay_slope(n_values, estimates, confidence: float = 0.95) -> dict:
    """Least-squares slope of log|estimate| against log n, with a t-interval."""
    pairs = [(n, abs(e)) for n, e in zip(n_values, estimates) if e is not None and e != 0]
    result = {"slope": None, "stderr": None, "ci_low": None, "ci_high": None, "points": len(pairs)}
    if len(pairs) < 2:
        return result
    x = np.log([p[0] for p in pairs])
    y = np.log([p[1] for p in pairs])
    fit = sp_stats.linregress(x, y)
    result.update(slope=float(fit.slope), stderr=float(fit.stderr))
    if len(pairs) > 2:
        half = float(sp_stats.t.ppf(0.5 + 0.5 * confidence, len(pairs) - 2)) * fit.stderr
        result.update(ci_low=float(fit.slope - half), ci_high=float(fit.slope + half))
    return result


# --- reports ----------------------------------------------------------------


@dataclass
class ExperimentReport:
    """Cells in a fixed order plus experiment-wide summaries.

    ``columns`` is the CSV header; a column holding ``{i}`` expands to one
    column per regular parameter.
    """

    kind: ClassVar[str] = ""
    columns: ClassVar[tuple[str, ...]] = ()

    config: dict
    d: int
    cells: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def header(self) -> list[str]:
        out = []
        for column in self.columns:
            if "{i}" in column:
                out.extend(column.format(i=i + 1) for i in range(self.d))
            else:
                out.append(column)
        return out

    def rows(self) -> list[list]:
        rows = []
        for cell in self.cells:
            row = []
            for column in self.columns:
                if "{i}" in column:
                    values = cell.get(column.replace("_{i}", "")) or [None] * self.d
                    row.extend("" if v is None else v for v in values)
                else:
                    value = cell.get(column)
                    row.append("" if value is None else value)
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            **metadata(self.config),
            "cells": self.cells,
            "summary": self.summary,
        }


class CoverageReport(ExperimentReport):
    kind = "coverage"
    columns = ("prior", "n", "level", "estimate", "se", "covered", "effective", "degenerate", "valid")


class MomentReport(ExperimentReport):
    kind = "moment"
    columns = (
        "prior",
        "n",
        "estimate",
        "se",
        "gap_mean",
        "gap_se",
        "theta_scaled_mean_{i}",
        "theta_scaled_se_{i}",
        "effective",
        "degenerate",
        "valid",
    )


class PivotLawReport(ExperimentReport):
    kind = "pivot_law"
    columns = ("n", "pivot", "estimate", "pvalue", "effective", "degenerate", "valid")


class ConsistencyReport(ExperimentReport):
    kind = "consistency"
    columns = (
        "n",
        "theta_error",
        "gamma_error",
        "theta_error_4n",
        "gamma_error_4n",
        "theta_ratio",
        "gamma_ratio",
        "effective",
        "degenerate",
        "valid",
    )


class ExpansionRateReport(ExperimentReport):
    kind = "expansion_rate"
    columns = ("prior", "n", "order", "estimate", "se", "effective", "degenerate", "valid")


def write_report(report: ExperimentReport, path: str | Path, fmt: Optional[str] = None) -> Path:
    """JSON or CSV (one row per cell); the format defaults to the file suffix."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "json").lower()
    if fmt not in ("json", "csv"):
        raise ConfigError(f"unknown report format {fmt!r}; use json or csv")
    try:
        if fmt == "json":
            return write_json(report.to_dict(), path)
        meta = {"schema_version": SCHEMA_VERSION, "kind": report.kind, **metadata(report.config)}
        return write_csv(path, report.header(), report.rows(), meta=meta)
    except OSError as e:
        raise TruncGeoError(f"cannot write report to {path}: {e}") from e


# --- experiment runners -----------------------------------------------------


def _resolve(cfg: ExperimentConfig, named_priors: Optional[Mapping[str, str]], needs_priors: bool):
    model = get_model(cfg.model)
    model.check(cfg.true_point)
    too_small = [n for n in cfg.n_values if n < model.d + 1]
    if too_small:
        raise ConfigError(f"sample sizes {too_small} are below d + 1 = {model.d + 1}")
    if needs_priors and not cfg.priors:
        raise ConfigError("this experiment needs at least one prior")
    priors = [resolve_prior(model, text, dict(named_priors or {})) for text in cfg.priors]
    return model, priors


def _cells(cfg: ExperimentConfig, model: ModelSpec, priors: list[PriorSpec]):
    for index, (label, prior) in enumerate(zip(cfg.priors, priors)):
        for n in cfg.n_values:
            yield _Cell(cfg, model, prior, label, index, n)


def _coverage_replication(cell: _Cell, rep: int) -> Optional[float]:
    fitted = _fit(cell, rep)
    if fitted is None:
        return None
    sample, mle = fitted
    pivot = Pivot.parse(cell.cfg.pivot)
    try:
        post = posterior_grid(cell.model, sample, cell.prior, cell.cfg.grid, mle)
        prob, _ = pivot_cdf(post, pivot, pivot.value(mle, cell.truth))
    except DEGENERATE as e:
        logger.debug(f"replication {rep} of {cell.label} n={cell.n} is degenerate: {e}")
        return None
    return prob


def _coverage_cells(cell: _Cell, workers: int, progress: bool) -> dict:
    probs = _run_replications(cell, _coverage_replication, workers, progress)
    kept = [p for p in probs if p is not None]
    degenerate = len(probs) - len(kept)
    out = []
    for level in cell.cfg.levels:
        covered = sum(p <= level for p in kept)
        estimate = covered / len(kept) if kept else None
        out.append(
            {
                "prior": cell.label,
                "n": cell.n,
                "level": level,
                "estimate": estimate,
                "se": binomial_se(estimate, len(kept)) if kept else None,
                "covered": covered,
                "effective": len(kept),
                "degenerate": degenerate,
                "valid": bool(kept),
            }
        )
    return {"cells": out}


def run_coverage(
    cfg: ExperimentConfig,
    named_priors: Optional[Mapping[str, str]] = None,
    progress: bool = True,
    use_cache: bool = True,
) -> CoverageReport:
    """Frequentist coverage of the one-sided posterior quantiles of the pivot.

    A replication covers at a level when the posterior probability of the
    pivot lying below its value at the true parameter is at most that level.
    """
    model, priors = _resolve(cfg, named_priors, needs_priors=True)
    report = CoverageReport(config=cfg.to_dict(), d=model.d)
    for cell in _cells(cfg, model, priors):
        identity = cell.identity("coverage", levels=list(cfg.levels), pivot=cfg.pivot)
        result = _cached(
            "coverage", identity, use_cache, lambda: _coverage_cells(cell, cfg.worker_count, progress)
        )
        report.cells.extend(result["cells"])
    return report


def _moment_replication(cell: _Cell, rep: int) -> Optional[tuple[float, np.ndarray]]:
    fitted = _fit(cell, rep)
    if fitted is None:
        return None
    sample, mle = fitted
    try:
        post = posterior_grid(cell.model, sample, cell.prior, cell.cfg.grid, mle)
    except DEGENERATE as e:
        logger.debug(f"replication {rep} of {cell.label} n={cell.n} is degenerate: {e}")
        return None
    theta_bayes, gamma_bayes = posterior_means(post)
    return gamma_bayes - mle.gamma_star, cell.n * (theta_bayes - mle.theta_hat)


def _moment_cell(cell: _Cell, workers: int, progress: bool) -> dict:
    results = _run_replications(cell, _moment_replication, workers, progress)
    kept = [r for r in results if r is not None]
    gaps = np.array([r[0] for r in kept])
    theta_scaled = np.array([r[1] for r in kept]).reshape(len(kept), cell.model.d)
    gap_mean, gap_se = _mean_se(gaps)
    scaled_mean, scaled_se = _mean_se(cell.n**2 * gaps)
    theta_stats = [_mean_se(theta_scaled[:, i]) for i in range(cell.model.d)]
    return {
        "prior": cell.label,
        "n": cell.n,
        "estimate": scaled_mean,
        "se": scaled_se,
        "gap_mean": gap_mean,
        "gap_se": gap_se,
        "theta_scaled_mean": [m for m, _ in theta_stats],
        "theta_scaled_se": [s for _, s in theta_stats],
        "effective": len(kept),
        "degenerate": len(results) - len(kept),
        "valid": bool(kept),
    }


def run_moment(
    cfg: ExperimentConfig,
    named_priors: Optional[Mapping[str, str]] = None,
    progress: bool = True,
    use_cache: bool = True,
) -> MomentReport:
    """Posterior-mean discrepancies gamma_B - gamma_star and theta_B - theta_hat.

    The summary holds, per prior, the log-log decay slope of |mean gap| across
    n and the large-sample limits of n^2 (gamma_B - gamma_star) and
    n (theta_B - theta_hat) at the true parameter.
    """
    model, priors = _resolve(cfg, named_priors, needs_priors=True)
    report = MomentReport(config=cfg.to_dict(), d=model.d)
    for cell in _cells(cfg, model, priors):
        identity = cell.identity("moment")
        report.cells.append(
            _cached("moment", identity, use_cache, lambda: _moment_cell(cell, cfg.worker_count, progress))
        )
    for label, prior in zip(cfg.priors, priors):
        cells = [c for c in report.cells if c["prior"] == label and c["valid"]]
        report.summary[label] = {
            "decay": decay_slope([c["n"] for c in cells], [c["gap_mean"] for c in cells]),
            "gamma_limit": gamma_moment_limit(model, cfg.true_point, prior),
            "theta_limit": theta_moment_limit(model, cfg.true_point, prior).tolist(),
        }
    return report


def _pivot_replication(cell: _Cell, rep: int) -> Optional[np.ndarray]:
    fitted = _fit(cell, rep)
    if fitted is None:
        return None
    _, mle = fitted
    pivots = [Pivot("T"), *(Pivot("U", i) for i in range(cell.model.d))]
    return np.array([p.value(mle, cell.truth) for p in pivots])


def _pivot_cells(cell: _Cell, workers: int, progress: bool) -> dict:
    results = _run_replications(cell, _pivot_replication, workers, progress)
    kept = np.array([r for r in results if r is not None]).reshape(-1, cell.model.d + 1)
    degenerate = len(results) - kept.shape[0]
    out = []
    laws = [("T", -kept[:, 0], "expon")]
    laws += [(f"U{i + 1}", kept[:, i + 1], "norm") for i in range(cell.model.d)]
    for name, values, law in laws:
        if values.size:
            test = sp_stats.kstest(values, law)
            statistic, pvalue = float(test.statistic), float(test.pvalue)
        else:
            statistic = pvalue = None
        out.append(
            {
                "n": cell.n,
                "pivot": name,
                "estimate": statistic,
                "pvalue": pvalue,
                "effective": int(values.size),
                "degenerate": degenerate,
                "valid": bool(values.size),
            }
        )
    return {"cells": out}


def run_pivot_law(cfg: ExperimentConfig, progress: bool = True, use_cache: bool = True) -> PivotLawReport:
    """Kolmogorov-Smirnov distances of -T to Exp(1) and of each U(i) to N(0, 1)."""
    model, _ = _resolve(cfg, None, needs_priors=False)
    report = PivotLawReport(config=cfg.to_dict(), d=model.d)
    for n in cfg.n_values:
        cell = _Cell(cfg, model, None, "mle", 0, n)
        result = _cached(
            "pivot_law", cell.identity("pivot_law"), use_cache, lambda: _pivot_cells(cell, cfg.worker_count, progress)
        )
        report.cells.extend(result["cells"])
    return report


def _error_replication(cell: _Cell, rep: int) -> Optional[tuple[float, float]]:
    fitted = _fit(cell, rep)
    if fitted is None:
        return None
    _, mle = fitted
    theta_error = float(np.linalg.norm(mle.theta_hat - cell.truth.theta_array))
    return theta_error, mle.gamma_hat - cell.truth.gamma


def _median_errors(cell: _Cell, workers: int, progress: bool) -> tuple[Optional[np.ndarray], int]:
    results = _run_replications(cell, _error_replication, workers, progress)
    kept = np.array([r for r in results if r is not None]).reshape(-1, 2)
    medians = np.median(np.abs(kept), axis=0) if kept.size else None
    return medians, len(results) - kept.shape[0]


def _consistency_cell(cfg: ExperimentConfig, model: ModelSpec, n: int, progress: bool) -> dict:
    small, small_degenerate = _median_errors(_Cell(cfg, model, None, "mle", 0, n), cfg.worker_count, progress)
    large, large_degenerate = _median_errors(
        _Cell(cfg, model, None, "mle", 0, 4 * n), cfg.worker_count, progress
    )
    valid = small is not None and large is not None
    return {
        "n": n,
        "theta_error": None if small is None else float(small[0]),
        "gamma_error": None if small is None else float(small[1]),
        "theta_error_4n": None if large is None else float(large[0]),
        "gamma_error_4n": None if large is None else float(large[1]),
        "theta_ratio": float(small[0] / large[0]) if valid and large[0] > 0 else None,
        "gamma_ratio": float(small[1] / large[1]) if valid and large[1] > 0 else None,
        "effective": 2 * cfg.replications - small_degenerate - large_degenerate,
        "degenerate": small_degenerate + large_degenerate,
        "valid": valid,
    }


def run_consistency(cfg: ExperimentConfig, progress: bool = True, use_cache: bool = True) -> ConsistencyReport:
    """Median absolute MLE errors at n and 4n.

    For a regular parameter the ratio approaches 2, for gamma it approaches 4.
    """
    model, _ = _resolve(cfg, None, needs_priors=False)
    report = ConsistencyReport(config=cfg.to_dict(), d=model.d)
    for n in cfg.n_values:
        identity = _Cell(cfg, model, None, "mle", 0, n).identity("consistency")
        report.cells.append(
            _cached("consistency", identity, use_cache, lambda: _consistency_cell(cfg, model, n, progress))
        )
    return report


def _gap_replication(cell: _Cell, rep: int, orders=(0, 1), box: Optional[ExpansionBox] = None):
    fitted = _fit(cell, rep)
    if fitted is None:
        return None
    sample, mle = fitted
    try:
        post = posterior_grid(cell.model, sample, cell.prior, cell.cfg.grid, mle)
        stats = expansion_stats(cell.model, sample, cell.prior, mle)
        return np.array([expansion_gap(stats, post, order, box) for order in orders])
    except DEGENERATE as e:
        logger.debug(f"replication {rep} of {cell.label} n={cell.n} is degenerate: {e}")
        return None


def expansion_rate(
    cfg: ExperimentConfig,
    orders: tuple[int, ...] = (0, 1),
    box: Optional[ExpansionBox] = None,
    named_priors: Optional[Mapping[str, str]] = None,
    progress: bool = True,
    use_cache: bool = True,
) -> ExpansionRateReport:
    """Mean sup-norm gap between the order-k expansion and the grid posterior.

    The summary holds the fitted log-log slope across n for each prior and
    order; the gap of order k decays like n^(-(k+1)/2).
    """
    model, priors = _resolve(cfg, named_priors, needs_priors=True)
    box = box or ExpansionBox()
    report = ExpansionRateReport(config={**cfg.to_dict(), "orders": list(orders), "box": asdict(box)}, d=model.d)
    replicate = partial(_gap_replication, orders=tuple(orders), box=box)

    def compute(cell: _Cell) -> dict:
        results = _run_replications(cell, replicate, cfg.worker_count, progress)
        kept = np.array([r for r in results if r is not None]).reshape(-1, len(orders))
        out = []
        for k, order in enumerate(orders):
            mean, se = _mean_se(kept[:, k])
            out.append(
                {
                    "prior": cell.label,
                    "n": cell.n,
                    "order": order,
                    "estimate": mean,
                    "se": se,
                    "effective": kept.shape[0],
                    "degenerate": len(results) - kept.shape[0],
                    "valid": bool(kept.shape[0]),
                }
            )
        return {"cells": out}

    for cell in _cells(cfg, model, priors):
        identity = cell.identity("expansion_rate", orders=list(orders), box=asdict(box))
        report.cells.extend(_cached("expansion_rate", identity, use_cache, lambda: compute(cell))["cells"])
    for label in cfg.priors:
        report.summary[label] = {}
        for order in orders:
            cells = [c for c in report.cells if c["prior"] == label and c["order"] == order and c["valid"]]
            report.summary[label][str(order)] = decay_slope(
                [c["n"] for c in cells], [c["estimate"] for c in cells]
            )
    return report


RUNNERS = {
    "coverage": run_coverage,
    "moment": run_moment,
    "pivot_law": run_pivot_law,
    "consistency": run_consistency,
    "expansion_rate": expansion_rate,
}
