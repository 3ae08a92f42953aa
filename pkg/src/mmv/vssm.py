"""Density of the variance-optimal signed supermartingale measure along
sampled paths, its conditional expectations, martingale sanity checks, and
the time-consistency-in-efficiency (TCIE) diagnostics.

The density of the measure is a running product of per-period factors
divided by the time-0 down-opportunity value: the factor is 1 - r'k_minus
while the running product is nonnegative and 1 + r'k_plus once it has gone
negative (a zero product takes the nonnegative branch).  Its conditional
expectation at time t is the running product times the current down (up)
opportunity value on the nonnegative (negative) branch, which is what the
TCIE conditions inspect: everywhere-nonnegative conditional expectations,
or a first-negative time after which the conditional expectation freezes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fio import FioTable
from .market import MarketModel

TCIE_CONDITION_33 = "Condition33"
TCIE_CONDITION_34 = "Condition34"
TCIE_NEITHER = "Neither"


@dataclass
class DensityPath:
    """Density evaluation along one path.

    ``factors[t]`` is the period-t multiplier, ``running[t]`` the product of
    factors before t (so ``running[0] = 1``), ``conditional[t]`` the
    conditional expectation of the terminal density given time-t
    information; ``conditional[T]`` equals the terminal density exactly.
    """

    factors: np.ndarray
    running: np.ndarray
    conditional: np.ndarray
    terminal_density: float
    d0_minus: float
    extrapolated: bool = False


def density_path(fio: FioTable, states, returns, d0_minus: Optional[float] = None) -> DensityPath:
    """Evaluate the density along one path.

    ``states`` holds s_0 .. s_{T-1} (the states at which decisions are
    made); ``returns`` holds r_1 .. r_T.  ``d0_minus`` defaults to the
    table's value at (0, s_0).
    """
    returns = np.atleast_2d(np.asarray(returns, dtype=float))
    horizon = fio.horizon
    if returns.shape[0] != horizon:
        raise ValueError(f"path has {returns.shape[0]} return rows, expected {horizon}")
    if len(states) < horizon:
        raise ValueError(f"path needs at least {horizon} states, got {len(states)}")
    if d0_minus is None:
        d0_minus = fio.d_minus_at(0, states[0])

    factors = np.empty(horizon)
    running = np.empty(horizon + 1)
    conditional = np.empty(horizon + 1)
    running[0] = 1.0
    extrapolated = False
    for t in range(horizon):
        try:
            k_minus = fio.k_minus_at(t, states[t])
            k_plus = fio.k_plus_at(t, states[t])
        except ValueError as exc:
            raise ValueError(f"state lookup failed at t={t}: {exc}") from None
        if not fio.is_discrete and fio.is_extrapolating(np.asarray(states[t], dtype=float)):
            extrapolated = True
        if running[t] >= 0.0:
            factors[t] = 1.0 - float(returns[t] @ k_minus)
        else:
            factors[t] = 1.0 + float(returns[t] @ k_plus)
        running[t + 1] = running[t] * factors[t]
    for t in range(horizon + 1):
        if t == horizon:
            d_here = 1.0
        elif running[t] >= 0.0:
            d_here = fio.d_minus_at(t, states[t])
        else:
            d_here = fio.d_plus_at(t, states[t])
        conditional[t] = running[t] / d0_minus * d_here
    return DensityPath(
        factors=factors,
        running=running,
        conditional=conditional,
        terminal_density=float(running[horizon] / d0_minus),
        d0_minus=float(d0_minus),
        extrapolated=extrapolated,
    )


def _batch_density(fio: FioTable, states, returns):
    """Vectorized density evaluation over simulated paths.

    ``states``: (n, T+1) regimes or (n, T+1, N_s) factors; ``returns``:
    (n, T, N).  Returns (factors, running, conditional) arrays with shapes
    (n, T), (n, T+1), (n, T+1).
    """
    n_paths, horizon = returns.shape[0], returns.shape[1]
    d0 = fio.d_minus_at(0, states[0, 0] if fio.is_discrete else states[0, 0])
    factors = np.empty((n_paths, horizon))
    running = np.empty((n_paths, horizon + 1))
    conditional = np.empty((n_paths, horizon + 1))
    running[:, 0] = 1.0
    for t in range(horizon):
        st = states[:, t]
        k_minus = fio.k_minus_batch(t, st)
        k_plus = fio.k_plus_batch(t, st)
        z_minus = np.einsum("li,li->l", returns[:, t], k_minus)
        z_plus = np.einsum("li,li->l", returns[:, t], k_plus)
        nonneg = running[:, t] >= 0.0
        factors[:, t] = np.where(nonneg, 1.0 - z_minus, 1.0 + z_plus)
        running[:, t + 1] = running[:, t] * factors[:, t]
    for t in range(horizon + 1):
        if t == horizon:
            d_here = np.ones(n_paths)
        else:
            dm = fio.d_minus_batch(t, states[:, t])
            dp = fio.d_plus_batch(t, states[:, t])
            d_here = np.where(running[:, t] >= 0.0, dm, dp)
        conditional[:, t] = running[:, t] / d0 * d_here
    return factors, running, conditional, d0


def _state_label(fio: FioTable, state) -> str:
    return str(int(state)) if fio.is_discrete else "all"


@dataclass
class MartingaleReport:
    n_paths: int
    seed: int
    density_mean: float
    density_se: float
    density_second_moment: float
    expected_second_moment: float
    unit_mass_ok: bool
    per_step: list = field(default_factory=list)
    supermartingale: list = field(default_factory=list)
    supermartingale_ok: bool = True
    per_step_ok: bool = True

    def to_json_dict(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "seed": self.seed,
            "density_mean": self.density_mean,
            "density_se": self.density_se,
            "density_second_moment": self.density_second_moment,
            "expected_second_moment": self.expected_second_moment,
            "unit_mass_ok": self.unit_mass_ok,
            "per_step": self.per_step,
            "per_step_ok": self.per_step_ok,
            "supermartingale": self.supermartingale,
            "supermartingale_ok": self.supermartingale_ok,
        }


def martingale_checks(
    fio: FioTable,
    model: MarketModel,
    n_paths: int,
    seed: int,
    initial_state,
    n_test_directions: int = 8,
) -> MartingaleReport:
    """Monte Carlo diagnostics of the measure's defining constraints:
    unit mass, unit conditional increments per (t, state bucket), and the
    supermartingale inequality against a panel of random feasible
    allocations.  Purely diagnostic; never raises on a violation."""
    if n_paths < 100:
        raise ValueError("need at least 100 paths for the diagnostics")
    states, returns = model.simulate_paths(fio.horizon, n_paths, seed, initial_state)
    factors, running, conditional, d0 = _batch_density(fio, states, returns)
    density = running[:, -1] / d0

    mean = float(density.mean())
    se = float(density.std(ddof=1) / np.sqrt(n_paths))
    second = float((density**2).mean())

    per_step = []
    per_step_ok = True
    increments_ok = np.abs(conditional[:, :-1]) > 1e-300
    for t in range(fio.horizon):
        buckets = (
            [(str(j), states[:, t] == j) for j in range(getattr(model, "n_states", 0))]
            if fio.is_discrete
            else [("all", np.ones(n_paths, dtype=bool))]
        )
        for label, mask in buckets:
            mask = mask & increments_ok[:, t]
            count = int(mask.sum())
            if count < 2:
                continue
            m = conditional[mask, t + 1] / conditional[mask, t]
            m_mean = float(m.mean())
            m_se = float(m.std(ddof=1) / np.sqrt(count))
            ok = abs(m_mean - 1.0) <= max(3.0 * m_se, 1e-12)
            per_step_ok &= ok
            per_step.append(
                {"t": t, "state": label, "n": count, "mean": m_mean, "se": m_se, "ok": ok}
            )

    rng = np.random.default_rng(seed + 1)
    from .cones import random_feasible_points

    supermartingale = []
    supermartingale_ok = True
    directions = list(random_feasible_points(fio.cone, n_test_directions, rng))
    for t in range(fio.horizon):
        buckets = (
            [(str(j), states[:, t] == j) for j in range(getattr(model, "n_states", 0))]
            if fio.is_discrete
            else [("all", np.ones(n_paths, dtype=bool))]
        )
        for label, mask in buckets:
            count = int(mask.sum())
            if count < 2:
                continue
            worst = -np.inf
            for pi in directions:
                vals = density[mask] * (returns[mask, t] @ pi)
                est = float(vals.mean())
                est_se = float(vals.std(ddof=1) / np.sqrt(count))
                margin = est - 3.0 * max(est_se, 1e-15)
                worst = max(worst, margin)
            ok = worst <= 1e-12
            supermartingale_ok &= ok
            supermartingale.append({"t": t, "state": label, "n": count, "worst_margin": worst, "ok": ok})

    return MartingaleReport(
        n_paths=n_paths,
        seed=seed,
        density_mean=mean,
        density_se=se,
        density_second_moment=second,
        expected_second_moment=1.0 / d0,
        unit_mass_ok=abs(mean - 1.0) <= max(3.0 * se, 1e-12),
        per_step=per_step,
        per_step_ok=per_step_ok,
        supermartingale=supermartingale,
        supermartingale_ok=supermartingale_ok,
    )


@dataclass
class TcieReport:
    n_paths: int
    seed: int
    verdict: str
    fraction_nonnegative_cells: float
    per_period_fraction_rk_le_1: list
    n_violating_paths: int
    first_negative_times: dict
    condition34_consistent: bool
    extrapolated_fraction: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "seed": self.seed,
            "verdict": self.verdict,
            "fraction_nonnegative_cells": self.fraction_nonnegative_cells,
            "per_period_fraction_rk_le_1": self.per_period_fraction_rk_le_1,
            "n_violating_paths": self.n_violating_paths,
            "first_negative_times": {str(k): v for k, v in self.first_negative_times.items()},
            "condition34_consistent": self.condition34_consistent,
            "extrapolated_fraction": self.extrapolated_fraction,
        }


def check_tcie(
    fio: FioTable, model: MarketModel, n_paths: int, seed: int, initial_state
) -> TcieReport:
    """Classify the sampled market against the two sufficient conditions for
    time consistency in efficiency.

    Condition33: every conditional expectation of the density is
    nonnegative on every sampled path (exact signs of computed products).
    Condition34: on each violating path, the conditional expectation is
    constant (exact float equality; the products share their factors) from
    its first negative time through the horizon.  Anything else: Neither.
    """
    if n_paths < 100:
        raise ValueError("need at least 100 paths for the diagnostics")
    states, returns = model.simulate_paths(fio.horizon, n_paths, seed, initial_state)
    factors, running, conditional, d0 = _batch_density(fio, states, returns)
    horizon = fio.horizon

    nonneg = conditional >= 0.0
    frac_nonneg = float(nonneg.mean())

    frac_rk = []
    for t in range(horizon):
        k_minus = fio.k_minus_batch(t, states[:, t])
        z = np.einsum("li,li->l", returns[:, t], k_minus)
        frac_rk.append(float((z <= 1.0).mean()))

    violating = ~nonneg.all(axis=1)
    n_viol = int(violating.sum())
    first_negative: dict[int, int] = {}
    condition34_consistent = True
    if n_viol:
        for i in np.flatnonzero(violating):
            tau = int(np.argmax(conditional[i] < 0.0))
            first_negative[tau] = first_negative.get(tau, 0) + 1
            tail = conditional[i, tau:]
            if not (np.all(tail < 0.0) and np.all(tail == tail[0])):
                condition34_consistent = False

    if n_viol == 0:
        verdict = TCIE_CONDITION_33
    elif condition34_consistent:
        verdict = TCIE_CONDITION_34
    else:
        verdict = TCIE_NEITHER

    if fio.is_discrete:
        extrapolated = 0.0
    else:
        flags = np.zeros(n_paths, dtype=bool)
        for t in range(horizon):
            flags |= fio.extrapolation_flags(t, states[:, t])
        extrapolated = float(flags.mean())

    return TcieReport(
        n_paths=n_paths,
        seed=seed,
        verdict=verdict,
        fraction_nonnegative_cells=frac_nonneg,
        per_period_fraction_rk_le_1=frac_rk,
        n_violating_paths=n_viol,
        first_negative_times=first_negative,
        condition34_consistent=condition34_consistent,
        extrapolated_fraction=extrapolated,
    )
