"""Command-line front end.

Subcommands: calibrate, fit, frontier, simulate, vssm, sweep.  Exit codes:
0 success, 2 validation error, 3 solver error, 4 I/O error.  Log level via
the MMV_LOG environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from . import backtest, fio, policy as policy_mod, vssm
from .approximator import FitError
from .config import (
    ConfigError,
    RunConfig,
    build_cone,
    build_grid,
    build_model,
    initial_state_of,
    load_config,
)
from .fio import SolverConfig, SolverError
from .market import (
    CalibrationError,
    DataFormatError,
    LinearFactorModel,
    MarkovChainModel,
    calibrate_linear_factor,
    join_on_dates,
    read_timeseries_csv,
)
from .util import child_seed

logger = logging.getLogger("mmv.cli")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_IO = 4


def _meta(config: RunConfig, command: str, seed: int) -> dict:
    return {
        "command": command,
        "config_hash": config.hash,
        "seed": seed,
        "generated": datetime.now(timezone.utc).isoformat(),
    }


def _comment(config: RunConfig, command: str, seed: int) -> str:
    return f"mmv {command} config_hash={config.hash} seed={seed}"


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _out_dir(args, config: Optional[RunConfig] = None) -> str:
    out = args.out or (config.raw.get("output_dir") if config else None) or "."
    os.makedirs(out, exist_ok=True)
    return out


def _solver_config(config: RunConfig) -> SolverConfig:
    block = config.raw.get("solver", {})
    return SolverConfig(
        tol=float(block.get("tol", 1e-8)),
        max_iter=int(block.get("max_iter", 2000)),
        n_starts=int(block.get("n_starts", 5)),
        greedy_cardinality=bool(block.get("greedy_cardinality", False)),
    )


def _workers(args, config: RunConfig) -> int:
    if args.workers is not None:
        return args.workers
    if config.workers is not None:
        return int(config.workers)
    return os.cpu_count() or 1


def _build_policy(config: RunConfig, table, model):
    state = initial_state_of(config, model)
    kwargs = {"lam": config.risk_aversion} if config.target is None else {"target": config.target}
    return policy_mod.PrecommittedPolicy(
        table, config.x0, state, risk_free=model.risk_free, model=model, **kwargs
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    config = load_config(args.config)
    block = config.calibrate or {}
    returns_path = args.returns or block.get("returns_csv")
    factors_path = args.factors or block.get("factors_csv")
    if not returns_path or not factors_path:
        raise ConfigError("calibrate needs returns and factors CSV paths (flags or config)")
    if args.returns is None:
        returns_path = os.path.join(config.path_base, returns_path)
    if args.factors is None:
        factors_path = os.path.join(config.path_base, factors_path)

    dates_r, returns, asset_names = read_timeseries_csv(returns_path)
    dates_f, factors, factor_names = read_timeseries_csv(factors_path)
    _, returns, factors = join_on_dates(dates_r, returns, dates_f, factors)
    model, report = calibrate_linear_factor(
        returns,
        factors,
        risk_free=config.model_spec.get("risk_free", 1.0),
        demean_factors=bool(block.get("demean_factors", False)),
        asset_names=asset_names,
        factor_names=factor_names,
    )
    out = _out_dir(args, config)
    payload = model.to_json_dict()
    payload["meta"] = _meta(config, "calibrate", config.seed)
    _write_json(os.path.join(out, "model.json"), payload)
    report_payload = report.to_json_dict()
    report_payload["meta"] = _meta(config, "calibrate", config.seed)
    _write_json(os.path.join(out, "calibration_report.json"), report_payload)
    print(f"calibrated {model.n_assets} assets on {model.n_factors} factors "
          f"({report.n_obs} observations) -> {out}/model.json")
    return EXIT_OK


def cmd_fit(args) -> int:
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    model = build_model(config)
    cone = build_cone(config, model.n_assets)
    solver = _solver_config(config)
    workers = _workers(args, config)
    started = time.perf_counter()
    if isinstance(model, MarkovChainModel):
        table = fio.backward_markov(
            model, cone, config.horizon, config.samples, seed, solver=solver, workers=workers
        )
    else:
        grid = build_grid(config, model)
        table = fio.backward_factor(
            model, cone, config.horizon, grid, config.samples, seed,
            fit_config=config.fit_config, k_mode=config.k_mode, solver=solver, workers=workers,
        )
    elapsed = time.perf_counter() - started

    out = _out_dir(args, config)
    payload = table.to_json_dict()
    payload["meta"] = _meta(config, "fit", seed)
    payload["meta"]["elapsed_seconds"] = elapsed
    if cone.is_unconstrained and isinstance(model, MarkovChainModel):
        d_ref, _ = fio.riccati_unconstrained(model, config.horizon, config.samples, seed)
        gap = float(np.abs(d_ref - table.d_minus).max())
        payload["meta"]["riccati_max_gap"] = gap
        logger.info("unconstrained closed-form cross-check gap: %.3e", gap)
    _write_json(os.path.join(out, "fio.json"), payload)

    diag_path = os.path.join(out, "fit_diagnostics.csv")
    with open(diag_path, "w", newline="") as handle:
        handle.write(f"# {_comment(config, 'fit', seed)}\n")
        import csv as _csv

        rows = table.diagnostics
        if rows:
            writer = _csv.DictWriter(handle, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    print(f"fitted opportunity table (horizon {config.horizon}) in {elapsed:.1f}s -> {out}/fio.json")
    return EXIT_OK


def _load_table(args, config: RunConfig, model):
    if not args.fio:
        raise ConfigError("this command needs --fio PATH (a table produced by 'mmv fit')")
    table = fio.load_table(args.fio)
    if table.horizon != config.horizon:
        raise ConfigError(
            f"table horizon {table.horizon} does not match config horizon {config.horizon}"
        )
    if table.n_assets != model.n_assets:
        raise ConfigError(
            f"table has {table.n_assets} assets but the model has {model.n_assets}"
        )
    if not table.is_discrete:
        table.attach_model(model)
    return table


def cmd_frontier(args) -> int:
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    model = build_model(config)
    table = _load_table(args, config, model)
    pol = _build_policy(config, table, model)
    rho0 = pol.rho.rho[0]
    base = rho0 * config.x0

    spec = config.frontier_targets or {}
    lo = float(spec.get("from", base))
    hi = float(spec.get("to", base + 2.0 * max(pol.implied_target - base, 0.1 * abs(base))))
    count = int(spec.get("count", 21))
    targets = np.linspace(lo, hi, count)
    points = policy_mod.efficient_frontier(pol.d0_minus, config.x0, rho0, targets)

    out = _out_dir(args, config)
    policy_mod.frontier_to_csv(
        points, os.path.join(out, "frontier.csv"), header_comment=_comment(config, "frontier", seed)
    )
    wrote = ["frontier.csv"]

    if config.coeff_sweep and isinstance(model, LinearFactorModel):
        _write_coeff_sweep(config, table, model, out, seed)
        wrote.append("policy_coeffs.csv")
    print(f"wrote {', '.join(wrote)} -> {out}")
    return EXIT_OK


def _write_coeff_sweep(config: RunConfig, table, model, out: str, seed: int) -> None:
    """Allocation-vector profile in one factor, the others pinned at low,
    median, and high percentiles of the fitted grid."""
    spec = config.coeff_sweep
    idx = int(spec.get("factor_index", 0))
    n_points = int(spec.get("n_points", 21))
    percentiles = spec.get("percentiles", [5, 50, 95])
    grid = table.grid
    lo, hi = grid[:, idx].min(), grid[:, idx].max()
    sweep = np.linspace(lo, hi, n_points)
    import csv as _csv

    with open(os.path.join(out, "policy_coeffs.csv"), "w", newline="") as handle:
        handle.write(f"# {_comment(config, 'frontier', seed)}\n")
        writer = _csv.writer(handle)
        writer.writerow(
            ["case", "percentile", "factor_index", "factor_value"]
            + [f"k_minus_{i + 1}" for i in range(table.n_assets)]
        )
        for case, pct in enumerate(percentiles, start=1):
            pinned = np.percentile(grid, pct, axis=0)
            for value in sweep:
                state = pinned.copy()
                state[idx] = value
                k = table.k_minus_at(0, state)
                writer.writerow(
                    [f"case{case}", pct, idx, repr(float(value))] + [repr(float(v)) for v in k]
                )


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    model = build_model(config)
    table = _load_table(args, config, model)
    pol = _build_policy(config, table, model)
    result = backtest.rollout(pol, model, config.n_paths, child_seed(seed, "simulate"))
    cost = None
    if config.cost:
        cost = backtest.CostModel(
            alpha0=float(config.cost.get("alpha0", 0.0)),
            alpha1=float(config.cost.get("alpha1", 0.0)),
            cardinality_q=int(config.cost.get("q", table.cone.max_active or table.n_assets)),
        )
    s = backtest.stats(result, cost=cost)
    out = _out_dir(args, config)
    payload = s.to_json_dict()
    payload["meta"] = _meta(config, "simulate", seed)
    _write_json(os.path.join(out, "stats.json"), payload)
    backtest.paths_to_csv(
        result, os.path.join(out, "paths.csv"), limit=config.paths_csv_limit,
        header_comment=_comment(config, "simulate", seed),
    )
    print(f"simulated {config.n_paths} paths: mean={s.mean:.6f} std={s.std:.6f} -> {out}")
    return EXIT_OK


def cmd_vssm(args) -> int:
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    model = build_model(config)
    table = _load_table(args, config, model)
    state = initial_state_of(config, model)
    mart = vssm.martingale_checks(table, model, config.n_paths, child_seed(seed, "vssm"), state)
    tcie = vssm.check_tcie(table, model, config.n_paths, child_seed(seed, "tcie"), state)
    out = _out_dir(args, config)
    payload = {
        "meta": _meta(config, "vssm", seed),
        "martingale": mart.to_json_dict(),
        "tcie": tcie.to_json_dict(),
    }
    _write_json(os.path.join(out, "vssm.json"), payload)
    print(f"density mean {mart.density_mean:.4f} (se {mart.density_se:.4f}); "
          f"TCIE verdict: {tcie.verdict} -> {out}/vssm.json")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    model = build_model(config)
    if not config.sweep_q:
        raise ConfigError("config: sweep needs a nonempty 'sweep_q' list")
    if any(q > model.n_assets for q in config.sweep_q):
        raise ConfigError(f"config: sweep_q entries must be <= {model.n_assets}")
    solver = _solver_config(config)
    workers = _workers(args, config)
    samples = config.sweep_samples or config.samples
    cost = backtest.CostModel(
        alpha0=float(config.cost.get("alpha0", 0.0)),
        alpha1=float(config.cost.get("alpha1", 0.0)),
    )
    from .cones import ConeConstraint

    policies = {}
    for q in config.sweep_q:
        # Same cone members with the cardinality bound swapped to q.
        cone = ConeConstraint(
            dimension=model.n_assets,
            require_nonnegative=bool(config.cone_spec.get("nonnegative", False)),
            linear=np.asarray(config.cone_spec["linear_rows"], dtype=float)
            if config.cone_spec.get("linear_rows")
            else None,
            max_active=q,
        )
        if isinstance(model, MarkovChainModel):
            table = fio.backward_markov(
                model, cone, config.horizon, samples, child_seed(seed, "sweep", q),
                solver=solver, workers=workers,
            )
        else:
            grid = build_grid(config, model)
            table = fio.backward_factor(
                model, cone, config.horizon, grid, samples, child_seed(seed, "sweep", q),
                fit_config=config.fit_config, k_mode=config.k_mode,
                solver=solver, workers=workers,
            )
        policies[q] = _build_policy(config, table, model)
    rows = backtest.cost_sweep(policies, cost, model, config.n_paths, child_seed(seed, "sweep-paths"))
    out = _out_dir(args, config)
    backtest.sweep_to_csv(
        rows, os.path.join(out, "sweep.csv"), header_comment=_comment(config, "sweep", seed)
    )
    print(f"swept q={config.sweep_q} -> {out}/sweep.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmv",
        description="Constrained multi-period mean-variance portfolio engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_fio in (
        ("calibrate", cmd_calibrate, False),
        ("fit", cmd_fit, False),
        ("frontier", cmd_frontier, True),
        ("simulate", cmd_simulate, True),
        ("vssm", cmd_vssm, True),
        ("sweep", cmd_sweep, False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--workers", type=int, default=None, help="parallel cell solves")
        p.add_argument("--out", default=None, help="output directory")
        if needs_fio:
            p.add_argument("--fio", default=None, help="fitted table from 'mmv fit'")
        if name == "calibrate":
            p.add_argument("--returns", default=None, help="returns CSV (date + N columns)")
            p.add_argument("--factors", default=None, help="factors CSV (date + N_s columns)")
        p.set_defaults(func=fn)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    level = os.environ.get("MMV_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolverError, FitError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
