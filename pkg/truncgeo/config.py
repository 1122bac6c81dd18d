import json
import logging
import math
import os
import tomllib
from dataclasses import fields
from pathlib import Path
from threading import RLock
from typing import Optional

import numpy as np

from truncgeo.exceptions import ConfigError
from truncgeo.expression import compile_expression, theta_names
from truncgeo.inference import GridConfig
from truncgeo.models import MODELS, ModelSpec, get_model, make_otef, register_model
from truncgeo.quadrature import QuadratureConfig

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = ("models", "priors", "experiments", "quadrature", "grid", "threads", "cache")
MODEL_KEYS = (
    "d",
    "statistics",
    "base",
    "psi",
    "theta_lower",
    "theta_upper",
    "upper",
    "start",
    "param_names",
    "tail_scale",
)
CACHE_KEYS = ("enabled", "path")
EXPERIMENT_KEYS = (
    "model",
    "true_point",
    "priors",
    "n_values",
    "replications",
    "levels",
    "pivot",
    "master_seed",
    "worker_count",
    "grid",
)
DEFAULT_THREADS = 4
THREADS_ENV = "TRUNCGEO_THREADS"


def _reject_unknown(table: str, data, known) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{table} must be a table, got {type(data).__name__}")
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {table}: {sorted(unknown)}")


def validate_config(data: dict) -> None:
    _reject_unknown("config", data, TOP_LEVEL_KEYS)
    for name, entry in data.get("models", {}).items():
        _reject_unknown(f"models.{name}", entry, MODEL_KEYS)
        if "d" not in entry or "statistics" not in entry or "base" not in entry:
            raise ConfigError(f"models.{name} needs d, statistics and base")
    for name, expr in data.get("priors", {}).items():
        if not isinstance(expr, str):
            raise ConfigError(f"priors.{name} must be an expression string")
    for name, entry in data.get("experiments", {}).items():
        _reject_unknown(f"experiments.{name}", entry, EXPERIMENT_KEYS)
    _reject_unknown("quadrature", data.get("quadrature", {}), [f.name for f in fields(QuadratureConfig)])
    _reject_unknown("grid", data.get("grid", {}), [f.name for f in fields(GridConfig)])
    _reject_unknown("cache", data.get("cache", {}), CACHE_KEYS)
    threads = data.get("threads")
    if threads is not None and (not isinstance(threads, int) or threads < 1):
        raise ConfigError(f"threads must be a positive integer, got {threads!r}")


def _read_file(path: Path) -> dict:
    try:
        if path.suffix == ".toml":
            with path.open("rb") as f:
                return tomllib.load(f)
        with path.open("r", encoding="utf-8") as f:
            return json.load(f)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot parse config file {path}: {e}") from e


class ConfigManager:
    _instance = None
    # reentrant: custom_config holds the lock while constructing the instance
    _lock = RLock()

    @classmethod
    def get_instance(cls):
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = cls()
        return cls._instance

    def __init__(self):
        if hasattr(self, "_initialized") and self._initialized:
            return
        self._initialized = True

        self._config_path = Path.home() / ".config" / "truncgeo" / "config.json"
        self._config_data = {}
        self._load_config(required=False)

    def _load_config(self, required=True):
        """Read the config file; a missing default file means an empty config."""
        with self._lock:
            if not self._config_path.exists():
                if required:
                    raise ConfigError(f"config file {self._config_path} not found")
                self._config_data = {}
                return
            data = _read_file(self._config_path)
            validate_config(data)
            self._config_data = data
            logger.debug(f"loaded config from {self._config_path}")

    @classmethod
    def custom_config(cls, file_path):
        """Load config file using custom path"""
        custom_path = Path(file_path)
        if not custom_path.exists():
            raise ConfigError(f"config file {custom_path} not found")
        with cls._lock:
            instance = cls()
            instance._config_path = custom_path
            instance._load_config()
            cls._instance = instance

    @classmethod
    def reset(cls):
        with cls._lock:
            cls._instance = None

    @classmethod
    def get(cls, key, default=None):
        """Config value, else the environment variable of the same name, else default."""
        instance = cls.get_instance()
        if key in instance._config_data:
            return instance._config_data[key]
        if key in os.environ:
            return os.environ[key]
        return default

    @classmethod
    def set(cls, key, value):
        instance = cls.get_instance()
        with instance._lock:
            candidate = {**instance._config_data, key: value}
            validate_config(candidate)
            instance._config_data = candidate

    @classmethod
    def delete(cls, key):
        instance = cls.get_instance()
        with instance._lock:
            instance._config_data.pop(key, None)

    @classmethod
    def clear(cls):
        instance = cls.get_instance()
        with instance._lock:
            instance._config_data = {}

    @classmethod
    def all(cls):
        return cls.get_instance()._config_data

    @classmethod
    def path(cls) -> Path:
        return cls.get_instance()._config_path

    @classmethod
    def worker_count(cls, cli_default: Optional[int] = None) -> int:
        """TRUNCGEO_THREADS, then the config, then the command line default."""
        raw = os.environ.get(THREADS_ENV)
        if raw is not None:
            try:
                value = int(raw)
            except ValueError as e:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
            if value < 1:
                raise ConfigError(f"{THREADS_ENV} must be positive, got {value}")
            return value
        configured = cls.get_instance()._config_data.get("threads")
        if configured is not None:
            return int(configured)
        return cli_default or DEFAULT_THREADS

    @classmethod
    def quadrature_config(cls) -> QuadratureConfig:
        try:
            return QuadratureConfig(**cls.get_instance()._config_data.get("quadrature", {}))
        except ValueError as e:
            raise ConfigError(f"bad quadrature settings: {e}") from e

    @classmethod
    def grid_config(cls) -> GridConfig:
        return GridConfig.from_dict(cls.get_instance()._config_data.get("grid", {}))

    @classmethod
    def named_priors(cls) -> dict[str, str]:
        return dict(cls.get_instance()._config_data.get("priors", {}))

    @classmethod
    def experiment(cls, name: str) -> dict:
        experiments = cls.get_instance()._config_data.get("experiments", {})
        if name not in experiments:
            raise ConfigError(f"no experiment {name!r} in {cls.path()}")
        return dict(experiments[name])

    @classmethod
    def cache_settings(cls) -> dict:
        return {"enabled": True, "path": None, **cls.get_instance()._config_data.get("cache", {})}

    @classmethod
    def register_models(cls) -> list[str]:
        """Register the user-defined models of the config; returns their names."""
        names = []
        for name, entry in cls.get_instance()._config_data.get("models", {}).items():
            model = model_from_config(name, entry)
            try:
                register_model(model)
            except ValueError as e:
                raise ConfigError(str(e)) from e
            names.append(name)
        return names

    @classmethod
    def model(cls, name: str) -> ModelSpec:
        entry = cls.get_instance()._config_data.get("models", {}).get(name)
        if entry is not None and name not in MODELS:
            return model_from_config(name, entry)
        return get_model(name)


def model_from_config(name: str, entry: dict) -> ModelSpec:
    """A generic oTEF from expressions for its statistics, carrier and optional psi."""
    _reject_unknown(f"models.{name}", entry, MODEL_KEYS)
    d = int(entry["d"])
    statistics = entry["statistics"]
    if isinstance(statistics, str):
        statistics = [statistics]
    if len(statistics) != d:
        raise ConfigError(f"models.{name}: {len(statistics)} statistics for d = {d}")
    stats = [compile_expression(text, ["x"]) for text in statistics]
    base = compile_expression(entry["base"], ["x"])

    def statistics_fn(x):
        x = np.asarray(x, dtype=float)
        return np.stack([np.broadcast_to(s({"x": x}), x.shape) for s in stats], axis=-1)

    def base_fn(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(base({"x": x}), x.shape)

    psi = None
    if entry.get("psi"):
        param_names = entry.get("param_names", ())
        components = theta_names(d, param_names)
        psi_expr = compile_expression(entry["psi"], [*components, "gamma"])

        def psi(theta, gamma):
            theta = np.asarray(theta, dtype=float)
            env = {key: theta[..., i] for key, i in components.items()}
            env["gamma"] = np.asarray(gamma, dtype=float)
            return psi_expr(env)

    return make_otef(
        name,
        statistics_fn,
        base_fn,
        d,
        theta_lower=tuple(entry.get("theta_lower", (-math.inf,) * d)),
        theta_upper=tuple(entry.get("theta_upper", (math.inf,) * d)),
        psi=psi,
        upper=float(entry.get("upper", math.inf)),
        tail_scale=float(entry.get("tail_scale", 1.0)),
        start=tuple(entry.get("start", ())),
        param_names=tuple(entry.get("param_names", ())),
        source=json.dumps(entry, sort_keys=True),
    )
