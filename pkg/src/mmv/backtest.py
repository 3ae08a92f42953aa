"""Policy rollouts through the self-financing wealth recursion, performance
statistics, and the management-fee / transaction-cost model.

Wealth follows x_{t+1} = r0_{t+1} x_t + r_{t+1}' pi_t exactly; the cost
model is applied ex post: decisions are made on the frictionless wealth
path, then a parallel cost-adjusted path deducts the up-front management
fee alpha0 * q * x0 and the per-period transaction cost
alpha1 * sum_i |pi_t_i / S_t_i - pi_{t-1}_i / S_{t-1}_i| at the time each
trade happens.  Per-asset prices are reconstructed from gross returns with
S_0 = 1 when the market is simulated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .market import MarketModel
from .policy import PrecommittedPolicy

WEALTH_RECURSION_TOL = 1e-12


@dataclass
class WealthPath:
    """One realized path: wealth levels, decisions, states, returns."""

    wealth: np.ndarray
    decisions: np.ndarray
    states: np.ndarray
    returns: np.ndarray
    extrapolated: np.ndarray


@dataclass
class RolloutResult:
    """Batch of simulated paths (arrays indexed path-first)."""

    wealth: np.ndarray
    decisions: np.ndarray
    states: np.ndarray
    returns: np.ndarray
    extrapolated: np.ndarray
    risk_free_growth: np.ndarray
    x0: float
    seed: int

    @property
    def n_paths(self) -> int:
        return self.wealth.shape[0]

    @property
    def horizon(self) -> int:
        return self.wealth.shape[1] - 1

    @property
    def terminal_wealth(self) -> np.ndarray:
        return self.wealth[:, -1]

    @property
    def baseline(self) -> float:
        """Pure risk-free terminal wealth rho_0 x_0."""
        return float(self.risk_free_growth[0] * self.x0)

    def __len__(self) -> int:
        return self.n_paths

    def __getitem__(self, i: int) -> WealthPath:
        return WealthPath(
            wealth=self.wealth[i],
            decisions=self.decisions[i],
            states=self.states[i],
            returns=self.returns[i],
            extrapolated=self.extrapolated[i],
        )

    def paths(self) -> Iterator[WealthPath]:
        for i in range(self.n_paths):
            yield self[i]


def rollout(
    policy: PrecommittedPolicy,
    model: MarketModel,
    n_paths: int,
    seed: int,
    check_feasibility: bool = True,
) -> RolloutResult:
    """Simulate ``n_paths`` through the model under the policy.

    Deterministic given the seed.  Decisions are produced by the policy's
    feedback map; each is scaled from a cone-feasible allocation vector by a
    branch-consistent nonnegative factor, so infeasibility would indicate a
    corrupted table and raises immediately.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    horizon = policy.horizon
    states, returns = model.simulate_paths(horizon, n_paths, seed, policy.initial_state)
    n_assets = returns.shape[2]
    wealth = np.empty((n_paths, horizon + 1))
    wealth[:, 0] = policy.x0
    decisions = np.empty((n_paths, horizon, n_assets))
    extrapolated = np.zeros((n_paths, horizon), dtype=bool)
    cone = policy.fio.cone
    for t in range(horizon):
        pi, flags = policy.decide_batch(t, wealth[:, t], states[:, t])
        decisions[:, t] = pi
        extrapolated[:, t] = flags
        if check_feasibility:
            _feasibility_guard(cone, pi, t)
        wealth[:, t + 1] = policy.rho.rate(t) * wealth[:, t] + np.einsum(
            "li,li->l", returns[:, t], pi
        )
    return RolloutResult(
        wealth=wealth,
        decisions=decisions,
        states=states,
        returns=returns,
        extrapolated=extrapolated,
        risk_free_growth=policy.rho.rho,
        x0=policy.x0,
        seed=seed,
    )


def _feasibility_guard(cone, pi: np.ndarray, t: int, tol: float = 1e-8) -> None:
    bad = None
    if cone.require_nonnegative and pi.min() < -tol:
        bad = int(np.argmin(pi.min(axis=1)))
    elif cone.linear is not None and (pi @ cone.linear.T).min() < -tol:
        bad = int(np.argmin((pi @ cone.linear.T).min(axis=1)))
    elif cone.max_active is not None:
        counts = (np.abs(pi) > tol).sum(axis=1)
        if counts.max() > cone.max_active:
            bad = int(np.argmax(counts))
    if bad is not None:
        raise RuntimeError(
            f"infeasible decision at t={t}, path {bad}: {pi[bad]} violates {cone!r}"
        )


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Management fee alpha0 * q * x0 charged up front plus per-period
    transaction costs alpha1 * sum |share-count changes|."""

    alpha0: float = 0.0
    alpha1: float = 0.0
    cardinality_q: int = 1

    def __post_init__(self):
        if self.alpha0 < 0 or self.alpha1 < 0:
            raise ValueError("cost rates must be nonnegative")


def reconstruct_prices(result: RolloutResult) -> np.ndarray:
    """Per-asset price paths implied by the realized gross returns, with
    every asset starting at 1; shape (n_paths, T+1, N)."""
    n_paths, horizon, n_assets = result.returns.shape
    prices = np.empty((n_paths, horizon + 1, n_assets))
    prices[:, 0] = 1.0
    rates = result.risk_free_growth[:-1] / result.risk_free_growth[1:]
    for t in range(horizon):
        gross = rates[t] + result.returns[:, t]
        prices[:, t + 1] = prices[:, t] * gross
    return prices


def cost_adjusted_wealth(result: RolloutResult, cost: CostModel) -> np.ndarray:
    """Terminal wealth after deducting the management fee at time 0 and the
    transaction cost of each rebalancing at the time it happens (initial
    positions are cash)."""
    n_paths, horizon, _ = result.decisions.shape
    prices = reconstruct_prices(result)
    rates = result.risk_free_growth[:-1] / result.risk_free_growth[1:]
    shares_prev = np.zeros((n_paths, result.decisions.shape[2]))
    adjusted = np.full(n_paths, result.x0 - cost.alpha0 * cost.cardinality_q * result.x0)
    for t in range(horizon):
        shares = result.decisions[:, t] / prices[:, t]
        turnover = np.abs(shares - shares_prev).sum(axis=1)
        tc = cost.alpha1 * turnover
        adjusted = rates[t] * (adjusted - tc) + np.einsum(
            "li,li->l", result.returns[:, t], result.decisions[:, t]
        )
        shares_prev = shares
    return adjusted


# ---------------------------------------------------------------------------
# Performance statistics
# ---------------------------------------------------------------------------


@dataclass
class PerformanceStats:
    """Terminal-wealth statistics.

    Sharpe is measured against the pure risk-free outcome rho_0 x_0;
    Sortino uses that same level as the minimum acceptable return; VaR and
    CVaR at the 5% level are stated on terminal-wealth shortfall relative
    to rho_0 x_0 (positive numbers are losses; the conditional tail average
    is at least the quantile by construction).
    """

    n_paths: int
    mean: float
    std: float
    sharpe: float
    sortino: float
    var: float
    cvar: float
    baseline: float
    level: float = 0.05
    degenerate: bool = False
    with_cost: Optional["PerformanceStats"] = None

    def to_json_dict(self) -> dict:
        out = {
            "n_paths": self.n_paths,
            "mean": self.mean,
            "std": self.std,
            "sharpe": None if math.isinf(self.sharpe) else self.sharpe,
            "sharpe_degenerate": self.degenerate,
            "sortino": None if math.isinf(self.sortino) else self.sortino,
            "var": self.var,
            "cvar": self.cvar,
            "baseline": self.baseline,
            "level": self.level,
            "definitions": (
                "sharpe=(mean-baseline)/std; sortino vs MAR=baseline; "
                "var/cvar on terminal shortfall baseline-x_T at the stated level "
                "(cvar averages the worst tail, so cvar >= var)"
            ),
        }
        if self.with_cost is not None:
            out["with_cost"] = self.with_cost.to_json_dict()
        return out


def _stats_of(terminal: np.ndarray, baseline: float, level: float) -> PerformanceStats:
    n = len(terminal)
    mean = float(terminal.mean())
    std = float(terminal.std(ddof=1)) if n > 1 else 0.0
    degenerate = std <= 1e-15
    sharpe = math.inf if degenerate else (mean - baseline) / std
    downside = np.minimum(terminal - baseline, 0.0)
    dd = float(np.sqrt(np.mean(downside**2)))
    sortino = math.inf if dd <= 1e-15 else (mean - baseline) / dd
    shortfall = baseline - terminal
    m = max(1, math.ceil(level * n))
    worst = np.sort(shortfall)[::-1][:m]
    var = float(worst[-1])
    cvar = float(worst.mean())
    return PerformanceStats(
        n_paths=n, mean=mean, std=std, sharpe=sharpe, sortino=sortino,
        var=var, cvar=cvar, baseline=baseline, level=level, degenerate=degenerate,
    )


def stats(
    result: RolloutResult, cost: Optional[CostModel] = None, level: float = 0.05
) -> PerformanceStats:
    """Terminal statistics of a rollout, with cost-adjusted variants when a
    cost model is given."""
    if result.n_paths < 1:
        raise ValueError("no paths")
    out = _stats_of(result.terminal_wealth, result.baseline, level)
    if cost is not None:
        out.with_cost = _stats_of(cost_adjusted_wealth(result, cost), result.baseline, level)
    return out


def cost_sweep(
    policies_by_q: dict[int, PrecommittedPolicy],
    cost: CostModel,
    model: MarketModel,
    n_paths: int,
    seed: int,
) -> list[dict]:
    """Per-cardinality with-cost Sharpe table (rows sorted by q)."""
    rows = []
    for q in sorted(policies_by_q):
        per_q_cost = CostModel(alpha0=cost.alpha0, alpha1=cost.alpha1, cardinality_q=q)
        result = rollout(policies_by_q[q], model, n_paths, seed)
        s = stats(result, cost=per_q_cost)
        rows.append(
            {
                "q": q,
                "sharpe": s.sharpe,
                "sharpe_with_cost": s.with_cost.sharpe,
                "mean_with_cost": s.with_cost.mean,
                "std_with_cost": s.with_cost.std,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------


def paths_to_csv(result: RolloutResult, path: str, limit: Optional[int] = None,
                 header_comment: str = "") -> None:
    n_assets = result.decisions.shape[2]
    count = result.n_paths if limit is None else min(limit, result.n_paths)
    with open(path, "w", newline="") as handle:
        if header_comment:
            handle.write(f"# {header_comment}\n")
        writer = csv.writer(handle)
        writer.writerow(["path", "t", "wealth"] + [f"pi_{i + 1}" for i in range(n_assets)])
        for p in range(count):
            for t in range(result.horizon + 1):
                pi = result.decisions[p, t] if t < result.horizon else [0.0] * n_assets
                writer.writerow([p, t, repr(float(result.wealth[p, t]))] + [repr(float(v)) for v in pi])


def sweep_to_csv(rows: Sequence[dict], path: str, header_comment: str = "") -> None:
    with open(path, "w", newline="") as handle:
        if header_comment:
            handle.write(f"# {header_comment}\n")
        writer = csv.writer(handle)
        writer.writerow(["q", "sharpe", "sharpe_with_cost", "mean_with_cost", "std_with_cost"])
        for row in rows:
            writer.writerow([row["q"], repr(row["sharpe"]), repr(row["sharpe_with_cost"]),
                             repr(row["mean_with_cost"]), repr(row["std_with_cost"])])
