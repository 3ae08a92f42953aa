"""Pre-committed piecewise-linear policies, efficient frontiers, and the
conditional Sharpe-ratio diagnostic.

A fitted opportunity table determines the whole policy family: the decision
at (t, x, s) invests along the down allocation vector when cumulative-growth
wealth sits at or below the threshold and along the up vector above it,
scaled linearly by the gap to the threshold.  The threshold is
rho_0 x_0 + lambda / d_0 in risk-aversion mode and x_tg + lambda*(x_tg) in
target mode; the two parameterizations produce identical decisions when
lambda = lambda*(x_tg).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .fio import FioTable
from .market import CumulativeRiskFree, RiskFree


class InfeasibleTargetError(ValueError):
    """The target problem admits no feasible policy (exhausted opportunity
    or a target below pure risk-free growth)."""


class DegenerateFrontierError(ValueError):
    """No risky opportunity: the frontier collapses to the risk-free point."""


@dataclass(frozen=True)
class FrontierPoint:
    expected_wealth: float
    variance: float


def lambda_star(x_tg: float, x0: float, rho0: float, d0_minus: float) -> float:
    """Risk-aversion weight that makes the weighted problem hit E[x_T] = x_tg."""
    if not 0.0 < d0_minus <= 1.0:
        raise ValueError(f"d0_minus must lie in (0, 1], got {d0_minus}")
    if d0_minus >= 1.0:
        raise InfeasibleTargetError(
            "no investment opportunity (d0 = 1): the target problem has no feasible policy"
        )
    if x_tg < rho0 * x0:
        raise InfeasibleTargetError(
            f"target {x_tg} below pure risk-free growth {rho0 * x0}"
        )
    return d0_minus * (x_tg - rho0 * x0) / (1.0 - d0_minus)


def mean_variance_of_optimum(lam: float, d0_minus: float, x0: float, rho0: float) -> FrontierPoint:
    """Exact terminal mean and variance attained by the optimal policy."""
    if lam < 0:
        raise ValueError("risk-aversion weight must be nonnegative")
    if not 0.0 < d0_minus <= 1.0:
        raise ValueError(f"d0_minus must lie in (0, 1], got {d0_minus}")
    lever = 1.0 / d0_minus - 1.0
    return FrontierPoint(expected_wealth=rho0 * x0 + lam * lever, variance=lam**2 * lever)


def efficient_frontier(
    d0_minus: float, x0: float, rho0: float, targets: Sequence[float]
) -> list[FrontierPoint]:
    """Frontier variance at each expected-wealth target:
    Var = d0 (E - rho0 x0)^2 / (1 - d0)."""
    if not 0.0 < d0_minus <= 1.0:
        raise ValueError(f"d0_minus must lie in (0, 1], got {d0_minus}")
    if d0_minus >= 1.0:
        raise DegenerateFrontierError("d0 = 1: the frontier degenerates to the risk-free point")
    base = rho0 * x0
    points = []
    for e in targets:
        if e < base - 1e-12:
            raise ValueError(f"target {e} below the risk-free point {base}")
        points.append(
            FrontierPoint(expected_wealth=float(e), variance=d0_minus * (e - base) ** 2 / (1.0 - d0_minus))
        )
    return points


class PrecommittedPolicy:
    """Feedback policy assembled from a fitted opportunity table.

    Parameters
    ----------
    fio : fitted table (discrete or continuous).
    x0 : initial wealth.
    initial_state : regime index or factor vector observed at time 0.
    risk_free : per-period gross risk-free return(s); defaults to the
        table-producing model's if given a model via ``model=``.
    lam / target : exactly one of the risk-aversion weight (>= 0) or the
        expected terminal-wealth target.
    model : optional market model, needed by continuous tables in resolve
        mode to recompute allocation vectors at observed states.
    """

    def __init__(
        self,
        fio: FioTable,
        x0: float,
        initial_state,
        risk_free: Optional[RiskFree] = None,
        lam: Optional[float] = None,
        target: Optional[float] = None,
        model=None,
        _allow_negative_lambda: bool = False,
    ):
        if (lam is None) == (target is None):
            raise ValueError("specify exactly one of lam= or target=")
        if model is not None and not fio.is_discrete:
            fio.attach_model(model)
        if risk_free is None:
            if model is None:
                raise ValueError("risk_free is required when no model is given")
            risk_free = model.risk_free
        self.fio = fio
        self.model = model
        self.x0 = float(x0)
        self.initial_state = initial_state
        self.rho = CumulativeRiskFree.build(risk_free, fio.horizon)
        self.d0_minus = fio.d_minus_at(0, initial_state)
        rho0 = self.rho.rho[0]

        if lam is not None:
            lam = float(lam)
            if lam < 0 and not _allow_negative_lambda:
                raise ValueError("risk-aversion weight must be nonnegative")
            self.mode = "lambda"
            self.lam = lam
            self.threshold = rho0 * self.x0 + lam / self.d0_minus
            self.implied_target = rho0 * self.x0 + lam * (1.0 / self.d0_minus - 1.0)
            start = self.x0 + lam / (self.d0_minus * rho0)
        else:
            target = float(target)
            self.mode = "target"
            self.lam = lambda_star(target, self.x0, rho0, self.d0_minus)
            self.threshold = target + self.lam
            self.implied_target = target
            start = self.threshold / rho0
        # Discounted threshold path W*/rho_t, accumulated forward with the
        # same per-period multiplications as the wealth recursion so that a
        # zero-weight policy tracks it to the last bit (exact zero decisions).
        path = np.empty(fio.horizon + 1)
        path[0] = start
        for t in range(fio.horizon):
            path[t + 1] = self.rho.rate(t) * path[t]
        self.threshold_path = path

    @property
    def horizon(self) -> int:
        return self.fio.horizon

    @property
    def w_star(self) -> float:
        """Cumulative-growth wealth threshold separating the two branches."""
        return self.threshold

    def decide(self, t: int, x: float, s) -> np.ndarray:
        """Allocation at time t given wealth x and state s (scalar form)."""
        pi, _ = self.decide_ex(t, x, s)
        return pi

    def decide_ex(self, t: int, x: float, s) -> tuple[np.ndarray, bool]:
        """As ``decide`` but also flags extrapolation outside the fitted
        state domain (continuous tables only; never an error)."""
        if not 0 <= t < self.horizon:
            raise ValueError(f"decision times run from 0 to {self.horizon - 1}, got {t}")
        gap_now = x - self.threshold_path[t]
        below = gap_now <= 0.0
        k = self.fio.k_minus_at(t, s) if below else self.fio.k_plus_at(t, s)
        pi = (-k if below else k) * (self.rho.rate(t) * gap_now)
        extrapolated = (not self.fio.is_discrete) and self.fio.is_extrapolating(
            np.asarray(s, dtype=float)
        )
        return pi, extrapolated

    def decide_batch(self, t: int, wealth: np.ndarray, states) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized decisions across paths; returns (decisions, flags)."""
        wealth = np.asarray(wealth, dtype=float)
        gap_now = wealth - self.threshold_path[t]
        below = gap_now <= 0.0
        k_minus = self.fio.k_minus_batch(t, states)
        k_plus = self.fio.k_plus_batch(t, states)
        k = np.where(below[:, None], -k_minus, k_plus)
        flags = self.fio.extrapolation_flags(t, states)
        return k * (self.rho.rate(t) * gap_now)[:, None], flags

    def conditional_sharpe(self, t: int, x: float, s) -> float:
        """Best attainable conditional Sharpe ratio of terminal wealth from
        (t, x, s); branches on cumulative-growth wealth against the target."""
        if not 0 <= t < self.horizon:
            raise ValueError(f"decision times run from 0 to {self.horizon - 1}, got {t}")
        if self.rho.rho[t] * x <= self.implied_target:
            d = self.fio.d_minus_at(t, s)
        else:
            d = self.fio.d_plus_at(t, s)
        return float(np.sqrt((1.0 - d) / d))

    def frontier_point(self) -> FrontierPoint:
        return mean_variance_of_optimum(self.lam, self.d0_minus, self.x0, self.rho.rho[0])


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------


def frontier_to_csv(points: Sequence[FrontierPoint], path: str, header_comment: str = "") -> None:
    with open(path, "w", newline="") as handle:
        if header_comment:
            handle.write(f"# {header_comment}\n")
        writer = csv.writer(handle)
        writer.writerow(["expected_wealth", "variance"])
        for p in points:
            writer.writerow([repr(p.expected_wealth), repr(p.variance)])


def decisions_to_csv(rows, n_assets: int, path: str, header_comment: str = "") -> None:
    """Rows of (t, state label, wealth, allocation vector)."""
    with open(path, "w", newline="") as handle:
        if header_comment:
            handle.write(f"# {header_comment}\n")
        writer = csv.writer(handle)
        writer.writerow(["t", "state", "wealth"] + [f"pi_{i + 1}" for i in range(n_assets)])
        for t, state, wealth, pi in rows:
            writer.writerow([t, state, repr(float(wealth))] + [repr(float(v)) for v in pi])
