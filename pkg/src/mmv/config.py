"""Run configuration: JSON schema validation and object construction."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .approximator import FitConfig
from .cones import ConeConstraint
from .market import LinearFactorModel, MarkovChainModel, read_timeseries_csv
from .util import config_hash


class ConfigError(ValueError):
    """Configuration file violates the schema."""


@dataclass
class RunConfig:
    """Validated run settings (one model, one cone, one objective)."""

    raw: dict
    path_base: str
    model_spec: dict
    cone_spec: dict
    horizon: int
    x0: float
    target: Optional[float]
    risk_aversion: Optional[float]
    samples: int
    seed: int
    initial_state: Any
    n_paths: int
    grid_spec: Optional[dict]
    fit_config: FitConfig
    k_mode: str
    workers: Optional[int]
    paths_csv_limit: int
    frontier_targets: Optional[dict]
    coeff_sweep: Optional[dict]
    sweep_q: list[int]
    sweep_samples: Optional[int]
    cost: dict
    calibrate: Optional[dict]

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def _require(spec: dict, key: str, where: str):
    if key not in spec:
        raise ConfigError(f"{where}: missing required key '{key}'")
    return spec[key]


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as handle:
            raw = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, path_base=os.path.dirname(os.path.abspath(path)))


def parse_config(raw: dict, path_base: str = ".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    model_spec = _require(raw, "model", "config")
    if not isinstance(model_spec, dict) or "type" not in model_spec:
        raise ConfigError("config: 'model' must be an object with a 'type'")
    if model_spec["type"] not in ("markov", "linear_factor"):
        raise ConfigError(f"config: unknown model type {model_spec['type']!r}")

    horizon = _require(raw, "horizon", "config")
    if not isinstance(horizon, int) or horizon < 1:
        raise ConfigError(f"config: horizon must be an integer >= 1, got {horizon!r}")

    target = raw.get("target")
    risk_aversion = raw.get("risk_aversion")
    if (target is None) == (risk_aversion is None):
        raise ConfigError("config: exactly one of 'target' or 'risk_aversion' must be present")

    for key in ("returns_csv", "factors_csv"):
        block = raw.get("calibrate") or {}
        if key in block:
            resolved = os.path.join(path_base, block[key])
            if not os.path.exists(resolved):
                raise ConfigError(f"config: referenced file does not exist: {block[key]}")
    if "path" in model_spec:
        resolved = os.path.join(path_base, model_spec["path"])
        if not os.path.exists(resolved):
            raise ConfigError(f"config: referenced model file does not exist: {model_spec['path']}")
    grid_spec = raw.get("grid")
    if grid_spec and grid_spec.get("type") == "historical":
        resolved = os.path.join(path_base, _require(grid_spec, "path", "config.grid"))
        if not os.path.exists(resolved):
            raise ConfigError(f"config: grid file does not exist: {grid_spec['path']}")

    k_mode = raw.get("k_mode", "resolve")
    if k_mode not in ("resolve", "fit"):
        raise ConfigError(f"config: k_mode must be 'resolve' or 'fit', got {k_mode!r}")

    try:
        fit_config = FitConfig.from_json_dict(raw.get("fit", {}))
    except ValueError as exc:
        raise ConfigError(f"config.fit: {exc}") from None

    sweep_q = raw.get("sweep_q", [])
    if not isinstance(sweep_q, list) or any(not isinstance(q, int) or q < 1 for q in sweep_q):
        raise ConfigError("config: sweep_q must be a list of positive integers")

    return RunConfig(
        raw=raw,
        path_base=path_base,
        model_spec=model_spec,
        cone_spec=raw.get("cone", {}),
        horizon=horizon,
        x0=float(raw.get("x0", 1.0)),
        target=None if target is None else float(target),
        risk_aversion=None if risk_aversion is None else float(risk_aversion),
        samples=int(raw.get("samples", 10_000)),
        seed=int(raw.get("seed", 0)),
        initial_state=raw.get("initial_state", 0),
        n_paths=int(raw.get("n_paths", 10_000)),
        grid_spec=grid_spec,
        fit_config=fit_config,
        k_mode=k_mode,
        workers=raw.get("workers"),
        paths_csv_limit=int(raw.get("paths_csv_limit", 1000)),
        frontier_targets=raw.get("frontier_targets"),
        coeff_sweep=raw.get("coeff_sweep"),
        sweep_q=sweep_q,
        sweep_samples=raw.get("sweep_samples"),
        cost=raw.get("cost", {}),
        calibrate=raw.get("calibrate"),
    )


def build_model(config: RunConfig):
    spec = config.model_spec
    try:
        if spec["type"] == "markov":
            return MarkovChainModel(
                transition=np.asarray(_require(spec, "transition", "config.model"), dtype=float),
                mean=np.asarray(_require(spec, "mean", "config.model"), dtype=float),
                cov=np.asarray(_require(spec, "cov", "config.model"), dtype=float),
                risk_free=spec.get("risk_free", 1.0),
            )
        if "path" in spec:
            with open(os.path.join(config.path_base, spec["path"])) as handle:
                loaded = json.load(handle)
            if "risk_free" in spec:
                loaded["risk_free"] = spec["risk_free"]
            return LinearFactorModel.from_json_dict(loaded)
        return LinearFactorModel(
            alpha=np.asarray(_require(spec, "alpha", "config.model"), dtype=float),
            loadings=np.asarray(_require(spec, "loadings", "config.model"), dtype=float),
            mean_reversion=np.asarray(_require(spec, "mean_reversion", "config.model"), dtype=float),
            sigma_eps=np.asarray(_require(spec, "sigma_eps", "config.model"), dtype=float),
            sigma_xi=np.asarray(_require(spec, "sigma_xi", "config.model"), dtype=float),
            risk_free=spec.get("risk_free", 1.0),
        )
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"config.model: {exc}") from None


def build_cone(config: RunConfig, n_assets: int) -> ConeConstraint:
    try:
        return ConeConstraint.from_json_dict(config.cone_spec, dimension=n_assets)
    except ValueError as exc:
        raise ConfigError(f"config.cone: {exc}") from None


def build_grid(config: RunConfig, model: LinearFactorModel) -> np.ndarray:
    spec = config.grid_spec
    if spec is None:
        raise ConfigError("config: factor models need a 'grid' section")
    kind = spec.get("type")
    if kind == "points":
        grid = np.asarray(_require(spec, "values", "config.grid"), dtype=float)
    elif kind == "historical":
        _, grid, _ = read_timeseries_csv(os.path.join(config.path_base, spec["path"]))
    elif kind == "random":
        size = int(spec.get("size", 100))
        if size < 2:
            raise ConfigError("config.grid: random grid size must be >= 2")
        if model.state_spectral_radius >= 1.0:
            raise ConfigError(
                "config.grid: the state process is nonstationary; "
                "random grids need mean reversion (supply explicit points instead)"
            )
        from scipy.linalg import solve_discrete_lyapunov

        cov = solve_discrete_lyapunov(model._persistence, model.sigma_xi)
        rng = np.random.default_rng(spec.get("seed", config.seed))
        chol = np.linalg.cholesky(cov + 1e-15 * np.eye(model.n_factors))
        grid = rng.standard_normal((size, model.n_factors)) @ chol.T
    else:
        raise ConfigError(f"config.grid: unknown type {kind!r}")
    grid = np.atleast_2d(grid)
    if grid.shape[1] != model.n_factors:
        raise ConfigError(
            f"config.grid: states have dimension {grid.shape[1]}, expected {model.n_factors}"
        )
    return grid


def initial_state_of(config: RunConfig, model) -> Any:
    state = config.initial_state
    if isinstance(model, MarkovChainModel):
        if not isinstance(state, int):
            raise ConfigError("config: initial_state must be a regime index for markov models")
        return state
    return np.asarray(state, dtype=float)
