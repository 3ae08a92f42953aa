"""Backward fitting of the future-investment-opportunity (FIO) processes.

The engine of the whole package.  Each backward step solves, per market
state, the pair of cone-constrained piecewise-quadratic programs

    down cell:  min_k  sum_l w_l (1 - r_l'k)^2 (dm_l if r_l'k <= 1 else dp_l)
    up cell:    min_k  sum_l w_l (1 + r_l'k)^2 (dm_l if r_l'k >= -1 else dp_l)

over the admissible cone, where (r_l, dm_l, dp_l) pair sampled next-period
returns with the next-period opportunity values and w_l are the sample
weights (uniform, or transition-probability weighted for regime models).
The sample objective is convex and continuously differentiable: both
quadratic pieces of each summand vanish to first order on the branch
boundary, so projected gradient descent certifies global optimality through
the projected-gradient residual.  Cardinality constraints are handled by
enumerating permitted supports and solving the restricted convex program on
each one.

The minimized values are the opportunity processes, always in (0, 1]; the
minimizers are the allocation vectors the piecewise-linear policy scales.
With no constraints the recursion collapses to a closed-form weighted
least-squares update, which is exposed separately as an oracle.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import cones as cones_mod
from .approximator import FitConfig, FittedFunction, fit as fit_function
from .cones import ConeConstraint, EnumerationCapError, SupportPattern
from .market import LinearFactorModel, MarkovChainModel, MarketModel, ScenarioSet
from .util import child_seed

logger = logging.getLogger("mmv.fio")

MINUS = "minus"
PLUS = "plus"

D_FLOOR = 1e-9
D_CEIL = 1.0


class SolverError(RuntimeError):
    """Projected-gradient residual failed to converge within the iteration cap."""

    def __init__(self, message: str, best_k=None, best_value=None, residual=None, cell=None):
        super().__init__(message)
        self.best_k = best_k
        self.best_value = best_value
        self.residual = residual
        self.cell = cell


@dataclass
class FioCellInput:
    """One backward cell: sampled next-period returns paired with the
    next-period opportunity values, plus the cone and the direction."""

    returns: np.ndarray
    d_minus_next: np.ndarray
    d_plus_next: np.ndarray
    cone: ConeConstraint
    direction: str
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.returns = np.atleast_2d(np.asarray(self.returns, dtype=float))
        self.d_minus_next = np.asarray(self.d_minus_next, dtype=float).ravel()
        self.d_plus_next = np.asarray(self.d_plus_next, dtype=float).ravel()
        n_samples = self.returns.shape[0]
        if n_samples < 1:
            raise ValueError("cell needs at least one sample")
        if self.d_minus_next.shape != (n_samples,) or self.d_plus_next.shape != (n_samples,):
            raise ValueError("next-step opportunity arrays must match the sample count")
        for name, arr in (("d_minus_next", self.d_minus_next), ("d_plus_next", self.d_plus_next)):
            if np.any(arr <= 0) or np.any(arr > 1.0 + 1e-9):
                raise ValueError(f"{name} values must lie in (0, 1]")
        if self.direction not in (MINUS, PLUS):
            raise ValueError(f"direction must be '{MINUS}' or '{PLUS}'")
        if self.cone.dimension != self.returns.shape[1]:
            raise ValueError(
                f"cone dimension {self.cone.dimension} does not match asset count "
                f"{self.returns.shape[1]}"
            )
        if self.weights is None:
            self.weights = np.full(n_samples, 1.0 / n_samples)
        else:
            self.weights = np.asarray(self.weights, dtype=float).ravel()
            if self.weights.shape != (n_samples,):
                raise ValueError("weights must match the sample count")
            if np.any(self.weights < 0):
                raise ValueError("weights must be nonnegative")
            total = self.weights.sum()
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"weights must sum to 1, got {total!r}")

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]


@dataclass
class CellDiagnostics:
    iterations: int = 0
    residual: float = float("nan")
    support: Optional[tuple[int, ...]] = None
    n_starts: int = 0
    heuristic: bool = False
    clamp_delta: float = 0.0
    next_minus_mean: float = float("nan")
    next_plus_mean: float = float("nan")
    next_minus_se: float = 0.0
    next_plus_se: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "support": list(self.support) if self.support is not None else None,
            "n_starts": self.n_starts,
            "heuristic": self.heuristic,
            "clamp_delta": self.clamp_delta,
            "next_minus_mean": self.next_minus_mean,
            "next_plus_mean": self.next_plus_mean,
            "next_minus_se": self.next_minus_se,
            "next_plus_se": self.next_plus_se,
        }


@dataclass
class FioCellOutput:
    k_star: np.ndarray
    d_star: float
    diagnostics: CellDiagnostics


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 2000
    n_starts: int = 5
    seed: int = 0
    greedy_cardinality: bool = False
    enumeration_cap: int = cones_mod.DEFAULT_ENUMERATION_CAP


# ---------------------------------------------------------------------------
# Sample-average objective and gradient
# ---------------------------------------------------------------------------


def _branch_arrays(cell: FioCellInput, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(residual, branch d) per sample; boundary samples take the d-minus
    branch, matching the inequality conventions of the recursions."""
    if cell.direction == MINUS:
        resid = 1.0 - z
        branch = np.where(z <= 1.0, cell.d_minus_next, cell.d_plus_next)
    else:
        resid = 1.0 + z
        branch = np.where(z >= -1.0, cell.d_minus_next, cell.d_plus_next)
    return resid, branch


def saa_objective(cell: FioCellInput, k: np.ndarray) -> float:
    """Weighted sample average of the cell integrand at allocation k."""
    k = np.asarray(k, dtype=float).ravel()
    if k.shape != (cell.n_assets,):
        raise ValueError(f"allocation has shape {k.shape}, expected ({cell.n_assets},)")
    z = cell.returns @ k
    resid, branch = _branch_arrays(cell, z)
    return float(np.sum(cell.weights * resid**2 * branch))


def saa_gradient(cell: FioCellInput, k: np.ndarray) -> np.ndarray:
    """Analytic gradient of ``saa_objective`` (continuous across the branch
    boundary because the quadratic factor vanishes there)."""
    k = np.asarray(k, dtype=float).ravel()
    z = cell.returns @ k
    resid, branch = _branch_arrays(cell, z)
    sign = -2.0 if cell.direction == MINUS else 2.0
    return sign * (cell.returns.T @ (cell.weights * branch * resid))


class _CellArrays:
    """Pre-sliced arrays for one (possibly support-restricted) convex solve."""

    def __init__(self, cell: FioCellInput, support: Optional[Sequence[int]] = None):
        self.support = tuple(support) if support is not None else None
        self.returns = cell.returns if support is None else np.ascontiguousarray(cell.returns[:, list(support)])
        self.weights = cell.weights
        self.dm = cell.d_minus_next
        self.dp = cell.d_plus_next
        self.minus = cell.direction == MINUS
        self.wdm = self.weights * self.dm

    def value_grad(self, k: np.ndarray):
        z = self.returns @ k
        if self.minus:
            resid = 1.0 - z
            branch = np.where(z <= 1.0, self.dm, self.dp)
            coeff = self.weights * branch * resid
            return float(np.sum(coeff * resid)), -2.0 * (self.returns.T @ coeff)
        resid = 1.0 + z
        branch = np.where(z >= -1.0, self.dm, self.dp)
        coeff = self.weights * branch * resid
        return float(np.sum(coeff * resid)), 2.0 * (self.returns.T @ coeff)

    def value(self, k: np.ndarray) -> float:
        z = self.returns @ k
        if self.minus:
            resid = 1.0 - z
            branch = np.where(z <= 1.0, self.dm, self.dp)
        else:
            resid = 1.0 + z
            branch = np.where(z >= -1.0, self.dm, self.dp)
        return float(np.sum(self.weights * resid**2 * branch))

    def closed_form_start(self) -> np.ndarray:
        """Branch-free weighted least-squares point (exact when the branch
        indicators never fire); used as a warm start."""
        gram = self.returns.T @ (self.returns * self.wdm[:, None])
        rhs = self.returns.T @ self.wdm
        try:
            k = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            k, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
        return k if self.minus else -k


def _projected_gradient(arrays: _CellArrays, cone: ConeConstraint, k0: np.ndarray,
                        tol: float, max_iter: int):
    """Projected gradient descent with Armijo backtracking and
    Barzilai-Borwein step warm starts."""
    k = cone.project(np.asarray(k0, dtype=float))
    f, g = arrays.value_grad(k)
    step = 1.0
    iterations = 0
    residual = np.inf
    for _ in range(max_iter):
        moved = cone.project(k - g)
        residual = float(np.linalg.norm(k - moved))
        if residual <= tol:
            break
        iterations += 1
        accepted = False
        for _bt in range(60):
            k_new = cone.project(k - step * g)
            delta = k_new - k
            decrease = float(g @ delta)
            if decrease >= 0.0:
                step *= 0.5
                continue
            f_new = arrays.value(k_new)
            if f_new <= f + 1e-4 * decrease:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        g_new = arrays.value_grad(k_new)[1]
        s = k_new - k
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-18:
            step = min(max(float(s @ s) / sy, 1e-12), 1e12)
        else:
            step = min(step * 2.0, 1e12)
        k, f, g = k_new, arrays.value(k_new), g_new
    else:
        moved = cone.project(k - g)
        residual = float(np.linalg.norm(k - moved))
    return k, f, residual, iterations


def _solve_convex(arrays: _CellArrays, cone: ConeConstraint, config: SolverConfig,
                  start_seed: int):
    """Multi-start convex solve: zero, the closed-form point projected, and
    seeded random feasible points (a safeguard against branch-boundary
    stalls; the objective is convex so all converged runs agree)."""
    dim = cone.dimension
    starts = [np.zeros(dim)]
    if config.n_starts >= 2:
        starts.append(arrays.closed_form_start())
    rng = np.random.default_rng(start_seed)
    scale = 1.0 + float(np.linalg.norm(starts[-1]))
    while len(starts) < config.n_starts:
        starts.append(rng.standard_normal(dim) * scale)

    best = None
    total_iter = 0
    converged = False
    for k0 in starts:
        k, f, residual, iters = _projected_gradient(arrays, cone, k0, config.tol, config.max_iter)
        total_iter += iters
        if best is None or f < best[1]:
            best = (k, f, residual)
        if residual <= config.tol:
            # Convexity: a certified residual is already the global optimum,
            # so the remaining starts (stall insurance) can be skipped.
            converged = True
            break
    if not converged:
        raise SolverError(
            f"projected-gradient residual {best[2]:.3e} above tolerance {config.tol:.0e} "
            f"after {config.max_iter} iterations",
            best_k=best[0],
            best_value=best[1],
            residual=best[2],
        )
    return best[0], best[1], best[2], total_iter


def _next_step_summary(cell: FioCellInput) -> tuple[float, float, float, float]:
    w = cell.weights
    mm = float(w @ cell.d_minus_next)
    pm = float(w @ cell.d_plus_next)
    mse = float(np.sqrt(np.sum(w**2 * (cell.d_minus_next - mm) ** 2)))
    pse = float(np.sqrt(np.sum(w**2 * (cell.d_plus_next - pm) ** 2)))
    return mm, pm, mse, pse


def solve_cell(cell: FioCellInput, config: Optional[SolverConfig] = None) -> FioCellOutput:
    """Minimize the cell objective over the admissible cone.

    Convex cones are solved by multi-start projected gradient descent with a
    certified residual; a cardinality member triggers support enumeration
    (or greedy forward selection past the cap) with the restricted convex
    problem solved on every support and the best kept.
    """
    config = config or SolverConfig()
    cone = cell.cone
    nm, pm, nse, pse = _next_step_summary(cell)

    if cone.is_convex:
        arrays = _CellArrays(cell)
        try:
            k, f, residual, iters = _solve_convex(
                arrays, cone, config, child_seed(config.seed, "starts", cell.direction)
            )
        except SolverError as err:
            err.cell = cell
            raise
        diag = CellDiagnostics(
            iterations=iters, residual=residual, support=None, n_starts=config.n_starts,
            next_minus_mean=nm, next_plus_mean=pm, next_minus_se=nse, next_plus_se=pse,
        )
        return _finalize(cell, k, f, diag)

    try:
        supports = cone.enumerate_supports(cap=config.enumeration_cap)
        heuristic = False
    except EnumerationCapError:
        if not config.greedy_cardinality:
            raise
        supports = None
        heuristic = True

    zero_value = float(cell.weights @ cell.d_minus_next)
    best_k = np.zeros(cell.n_assets)
    best_value = zero_value
    best_support: Optional[tuple[int, ...]] = None
    best_residual = 0.0
    total_iter = 0

    if supports is not None:
        for pattern in supports:
            k_sub, f_sub, residual, iters = _solve_support(cell, pattern.indices, config)
            total_iter += iters
            if f_sub < best_value - 1e-15:
                best_value = f_sub
                best_k = _embed(k_sub, pattern.indices, cell.n_assets)
                best_support = pattern.indices
                best_residual = residual
    else:
        chosen: list[int] = []
        remaining = set(range(cell.n_assets))
        current_value = zero_value
        for _ in range(cone.max_active):
            round_best = None
            for idx in sorted(remaining):
                trial = tuple(sorted(chosen + [idx]))
                k_sub, f_sub, residual, iters = _solve_support(cell, trial, config)
                total_iter += iters
                if round_best is None or f_sub < round_best[1]:
                    round_best = (idx, f_sub, k_sub, trial, residual)
            if round_best is None or round_best[1] >= current_value - 1e-15:
                break
            idx, current_value, k_sub, trial, residual = round_best
            chosen.append(idx)
            remaining.discard(idx)
            best_value = current_value
            best_k = _embed(k_sub, trial, cell.n_assets)
            best_support = trial
            best_residual = residual

    diag = CellDiagnostics(
        iterations=total_iter, residual=best_residual, support=best_support,
        n_starts=config.n_starts, heuristic=heuristic,
        next_minus_mean=nm, next_plus_mean=pm, next_minus_se=nse, next_plus_se=pse,
    )
    return _finalize(cell, best_k, best_value, diag)


def _solve_support(cell: FioCellInput, support: tuple[int, ...], config: SolverConfig):
    arrays = _CellArrays(cell, support)
    restricted = cell.cone.restrict(support)
    try:
        return _solve_convex(
            arrays, restricted, config,
            child_seed(config.seed, "starts", cell.direction, list(support)),
        )
    except SolverError as err:
        err.cell = cell
        raise


def _embed(k_sub: np.ndarray, support: Sequence[int], n: int) -> np.ndarray:
    out = np.zeros(n)
    out[list(support)] = k_sub
    return out


def _finalize(cell: FioCellInput, k: np.ndarray, value: float, diag: CellDiagnostics) -> FioCellOutput:
    clamped = min(max(value, D_FLOOR), D_CEIL)
    diag.clamp_delta = abs(clamped - value)
    if diag.clamp_delta > 1e-6:
        logger.warning("opportunity value %.6g clamped to %.6g", value, clamped)
    return FioCellOutput(k_star=np.asarray(k, dtype=float), d_star=clamped, diagnostics=diag)


# ---------------------------------------------------------------------------
# Closed-form recursion for the unconstrained case (oracle)
# ---------------------------------------------------------------------------


def riccati_cell(returns: np.ndarray, weights: np.ndarray, d_next: np.ndarray):
    """Closed-form minimizer of the unconstrained down cell on given samples.

    Reweighting the samples by d_next / mean(d_next) turns the minimized
    value into mean(d_next) * (1 - m' M^{-1} m) with m, M the reweighted
    first and second moments; the minimizer solves the weighted normal
    equations.  Returns (d, k).
    """
    returns = np.atleast_2d(np.asarray(returns, dtype=float))
    weights = np.asarray(weights, dtype=float).ravel()
    d_next = np.asarray(d_next, dtype=float).ravel()
    wd = weights * d_next
    gram = returns.T @ (returns * wd[:, None])
    rhs = returns.T @ wd
    try:
        k = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolverError(
            "singular weighted second-moment matrix in the closed-form recursion "
            "(sample-level violation of the nondegeneracy assumption)"
        ) from exc
    d = float(wd.sum() - rhs @ k)
    return d, k


def riccati_unconstrained(model: MarkovChainModel, horizon: int, n_samples: int, seed: int):
    """Unconstrained opportunity recursion on the same scenario sets the
    numeric backward pass uses (identical child seeds), as a cross-check
    oracle: with no constraints the down and up values coincide and the up
    minimizer is the negated down minimizer.

    Returns (d, k_minus) with shapes (T+1, M) and (T, M, N).
    """
    m, n = model.n_states, model.n_assets
    d = np.ones((horizon + 1, m))
    k_minus = np.zeros((horizon, m, n))
    for t in range(horizon - 1, -1, -1):
        blocks = [
            model.sample_returns_given_state(j, n_samples, child_seed(seed, t, j))
            for j in range(m)
        ]
        returns = np.vstack(blocks)
        d_next = np.repeat(d[t + 1], n_samples)
        for s in range(m):
            weights = np.repeat(model.transition[s] / n_samples, n_samples)
            d_val, k_val = riccati_cell(returns, weights, d_next)
            d[t, s] = min(max(d_val, D_FLOOR), D_CEIL)
            k_minus[t, s] = k_val
    return d, k_minus


# ---------------------------------------------------------------------------
# Fio tables
# ---------------------------------------------------------------------------

FIO_FORMAT = "mmv-fio/1"


@dataclass
class DiscreteFioTable:
    """Fitted opportunity processes over a finite regime space.

    ``d_minus``/``d_plus`` have shape (T+1, M) with the boundary row equal to
    one exactly; ``k_minus``/``k_plus`` have shape (T, M, N).
    """

    horizon: int
    n_states: int
    n_assets: int
    d_minus: np.ndarray
    d_plus: np.ndarray
    k_minus: np.ndarray
    k_plus: np.ndarray
    cone: ConeConstraint
    master_seed: int
    n_samples: int
    diagnostics: list = field(default_factory=list)

    is_discrete = True

    def _check(self, t: int, state) -> int:
        if not 0 <= t <= self.horizon:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        state = int(state)
        if not 0 <= state < self.n_states:
            raise ValueError(f"state {state} outside [0, {self.n_states})")
        return state

    def d_minus_at(self, t: int, state) -> float:
        state = self._check(t, state)
        return float(self.d_minus[t, state])

    def d_plus_at(self, t: int, state) -> float:
        state = self._check(t, state)
        return float(self.d_plus[t, state])

    def k_minus_at(self, t: int, state) -> np.ndarray:
        state = self._check(t, state)
        if t >= self.horizon:
            raise ValueError("allocation vectors are defined for t < horizon")
        return self.k_minus[t, state]

    def k_plus_at(self, t: int, state) -> np.ndarray:
        state = self._check(t, state)
        if t >= self.horizon:
            raise ValueError("allocation vectors are defined for t < horizon")
        return self.k_plus[t, state]

    # Vectorized lookups used by rollouts (states: int array).
    def k_minus_batch(self, t: int, states: np.ndarray) -> np.ndarray:
        return self.k_minus[t, np.asarray(states, dtype=int)]

    def k_plus_batch(self, t: int, states: np.ndarray) -> np.ndarray:
        return self.k_plus[t, np.asarray(states, dtype=int)]

    def d_minus_batch(self, t: int, states: np.ndarray) -> np.ndarray:
        return self.d_minus[t, np.asarray(states, dtype=int)]

    def d_plus_batch(self, t: int, states: np.ndarray) -> np.ndarray:
        return self.d_plus[t, np.asarray(states, dtype=int)]

    def extrapolation_flags(self, t: int, states: np.ndarray) -> np.ndarray:
        return np.zeros(len(np.atleast_1d(states)), dtype=bool)

    def to_json_dict(self) -> dict:
        return {
            "format": FIO_FORMAT,
            "kind": "markov",
            "horizon": self.horizon,
            "n_states": self.n_states,
            "n_assets": self.n_assets,
            "master_seed": self.master_seed,
            "n_samples": self.n_samples,
            "cone": self.cone.to_json_dict(),
            "d_minus": self.d_minus.tolist(),
            "d_plus": self.d_plus.tolist(),
            "k_minus": self.k_minus.tolist(),
            "k_plus": self.k_plus.tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json_dict(cls, spec: dict) -> "DiscreteFioTable":
        return cls(
            horizon=int(spec["horizon"]),
            n_states=int(spec["n_states"]),
            n_assets=int(spec["n_assets"]),
            d_minus=np.asarray(spec["d_minus"], dtype=float),
            d_plus=np.asarray(spec["d_plus"], dtype=float),
            k_minus=np.asarray(spec["k_minus"], dtype=float),
            k_plus=np.asarray(spec["k_plus"], dtype=float),
            cone=ConeConstraint.from_json_dict(spec["cone"]),
            master_seed=int(spec["master_seed"]),
            n_samples=int(spec["n_samples"]),
            diagnostics=spec.get("diagnostics", []),
        )


@dataclass
class ContinuousFioTable:
    """Fitted opportunity processes over a continuous factor space.

    Scalar opportunity functions are stored as fitted approximators per time
    step; allocation vectors are either evaluated from their own fitted
    approximators (``k_mode == "fit"``) or re-solved at the queried state
    from fresh samples against the fitted next-step opportunities
    (``k_mode == "resolve"``, the accuracy default).  Resolve mode needs a
    market model attached (``attach_model``); tables loaded from JSON fall
    back to fitted evaluation until one is attached.
    """

    horizon: int
    n_assets: int
    n_factors: int
    grid: np.ndarray
    d_minus_fn: list
    d_plus_fn: list
    k_minus_fn: list
    k_plus_fn: list
    raw_d_minus: np.ndarray
    raw_d_plus: np.ndarray
    raw_k_minus: np.ndarray
    raw_k_plus: np.ndarray
    cone: ConeConstraint
    master_seed: int
    n_samples: int
    k_mode: str = "resolve"
    validation_errors: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    solver: SolverConfig = field(default_factory=SolverConfig)
    _model: Optional[LinearFactorModel] = None

    is_discrete = False

    def __post_init__(self):
        self._lo = self.grid.min(axis=0)
        self._hi = self.grid.max(axis=0)

    def attach_model(self, model: LinearFactorModel) -> None:
        if model.n_factors != self.n_factors or model.n_assets != self.n_assets:
            raise ValueError("model dimensions do not match the table")
        self._model = model

    def _check_state(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float).ravel()
        if s.shape != (self.n_factors,):
            raise ValueError(f"state has shape {s.shape}, expected ({self.n_factors},)")
        return s

    def is_extrapolating(self, s: np.ndarray) -> bool:
        s = np.asarray(s, dtype=float)
        return bool(np.any(s < self._lo) or np.any(s > self._hi))

    def extrapolation_flags(self, t: int, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        return np.any((states < self._lo) | (states > self._hi), axis=1)

    def d_minus_at(self, t: int, s) -> float:
        if t >= self.horizon:
            return 1.0
        return float(self.d_minus_fn[t].evaluate(self._check_state(s))[0])

    def d_plus_at(self, t: int, s) -> float:
        if t >= self.horizon:
            return 1.0
        return float(self.d_plus_fn[t].evaluate(self._check_state(s))[0])

    def d_minus_batch(self, t: int, states: np.ndarray) -> np.ndarray:
        if t >= self.horizon:
            return np.ones(len(np.atleast_2d(states)))
        return self.d_minus_fn[t].evaluate_batch(states)[:, 0]

    def d_plus_batch(self, t: int, states: np.ndarray) -> np.ndarray:
        if t >= self.horizon:
            return np.ones(len(np.atleast_2d(states)))
        return self.d_plus_fn[t].evaluate_batch(states)[:, 0]

    def _resolve_k(self, t: int, s: np.ndarray, direction: str) -> np.ndarray:
        scen = self._model.sample_scenarios(
            t, s, self.n_samples, child_seed(self.master_seed, "resolve", t, s)
        )
        if t == self.horizon - 1:
            dm = np.ones(scen.n_samples)
            dp = np.ones(scen.n_samples)
        else:
            dm = self.d_minus_fn[t + 1].evaluate_batch(scen.states)[:, 0]
            dp = self.d_plus_fn[t + 1].evaluate_batch(scen.states)[:, 0]
        cell = FioCellInput(scen.returns, dm, dp, self.cone, direction)
        cfg = replace(self.solver, seed=child_seed(self.master_seed, "resolve", t, s, direction))
        return solve_cell(cell, cfg).k_star

    def k_minus_at(self, t: int, s) -> np.ndarray:
        s = self._check_state(s)
        if self.k_mode == "resolve" and self._model is not None:
            return self._resolve_k(t, s, MINUS)
        return self.k_minus_fn[t].evaluate(s)

    def k_plus_at(self, t: int, s) -> np.ndarray:
        s = self._check_state(s)
        if self.k_mode == "resolve" and self._model is not None:
            return self._resolve_k(t, s, PLUS)
        return self.k_plus_fn[t].evaluate(s)

    def k_minus_batch(self, t: int, states: np.ndarray) -> np.ndarray:
        if self.k_mode == "resolve" and self._model is not None:
            return np.vstack([self._resolve_k(t, s, MINUS) for s in np.atleast_2d(states)])
        return self.k_minus_fn[t].evaluate_batch(states)

    def k_plus_batch(self, t: int, states: np.ndarray) -> np.ndarray:
        if self.k_mode == "resolve" and self._model is not None:
            return np.vstack([self._resolve_k(t, s, PLUS) for s in np.atleast_2d(states)])
        return self.k_plus_fn[t].evaluate_batch(states)

    def to_json_dict(self) -> dict:
        return {
            "format": FIO_FORMAT,
            "kind": "factor",
            "horizon": self.horizon,
            "n_assets": self.n_assets,
            "n_factors": self.n_factors,
            "master_seed": self.master_seed,
            "n_samples": self.n_samples,
            "k_mode": self.k_mode,
            "cone": self.cone.to_json_dict(),
            "grid": self.grid.tolist(),
            "raw_d_minus": self.raw_d_minus.tolist(),
            "raw_d_plus": self.raw_d_plus.tolist(),
            "raw_k_minus": self.raw_k_minus.tolist(),
            "raw_k_plus": self.raw_k_plus.tolist(),
            "d_minus_fn": [f.to_json_dict() for f in self.d_minus_fn],
            "d_plus_fn": [f.to_json_dict() for f in self.d_plus_fn],
            "k_minus_fn": [f.to_json_dict() for f in self.k_minus_fn],
            "k_plus_fn": [f.to_json_dict() for f in self.k_plus_fn],
            "validation_errors": self.validation_errors,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json_dict(cls, spec: dict) -> "ContinuousFioTable":
        return cls(
            horizon=int(spec["horizon"]),
            n_assets=int(spec["n_assets"]),
            n_factors=int(spec["n_factors"]),
            grid=np.asarray(spec["grid"], dtype=float),
            d_minus_fn=[FittedFunction.from_json_dict(f) for f in spec["d_minus_fn"]],
            d_plus_fn=[FittedFunction.from_json_dict(f) for f in spec["d_plus_fn"]],
            k_minus_fn=[FittedFunction.from_json_dict(f) for f in spec["k_minus_fn"]],
            k_plus_fn=[FittedFunction.from_json_dict(f) for f in spec["k_plus_fn"]],
            raw_d_minus=np.asarray(spec["raw_d_minus"], dtype=float),
            raw_d_plus=np.asarray(spec["raw_d_plus"], dtype=float),
            raw_k_minus=np.asarray(spec["raw_k_minus"], dtype=float),
            raw_k_plus=np.asarray(spec["raw_k_plus"], dtype=float),
            cone=ConeConstraint.from_json_dict(spec["cone"]),
            master_seed=int(spec["master_seed"]),
            n_samples=int(spec["n_samples"]),
            k_mode=spec.get("k_mode", "resolve"),
            validation_errors=spec.get("validation_errors", []),
            diagnostics=spec.get("diagnostics", []),
        )


FioTable = Union[DiscreteFioTable, ContinuousFioTable]


def save_table(table: FioTable, path: str) -> None:
    with open(path, "w") as handle:
        json.dump(table.to_json_dict(), handle)


def load_table(path: str) -> FioTable:
    with open(path) as handle:
        spec = json.load(handle)
    if spec.get("format") != FIO_FORMAT:
        raise ValueError(f"{path}: unrecognized table format {spec.get('format')!r}")
    if spec["kind"] == "markov":
        return DiscreteFioTable.from_json_dict(spec)
    return ContinuousFioTable.from_json_dict(spec)


# ---------------------------------------------------------------------------
# Backward recursions
# ---------------------------------------------------------------------------


def _run_cells(tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda task: task(), tasks))


def backward_markov(
    model: MarkovChainModel,
    cone: ConeConstraint,
    horizon: int,
    n_samples: int,
    seed: int,
    solver: Optional[SolverConfig] = None,
    workers: int = 1,
) -> DiscreteFioTable:
    """Backward recursion for the regime-switching model.

    Per time step, draws ``n_samples`` returns for each next regime (seeded
    per (t, regime), shared by every origin regime and by both cell
    directions) and solves the transition-probability-weighted sample
    problems for every origin regime.  Deterministic given the seed and
    independent of the worker count.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if n_samples < 1:
        raise ValueError("sample count must be >= 1")
    solver = solver or SolverConfig()
    m, n = model.n_states, model.n_assets
    if cone.dimension != n:
        raise ValueError(f"cone dimension {cone.dimension} does not match {n} assets")

    d_minus = np.ones((horizon + 1, m))
    d_plus = np.ones((horizon + 1, m))
    k_minus = np.zeros((horizon, m, n))
    k_plus = np.zeros((horizon, m, n))
    diagnostics: list = []

    for t in range(horizon - 1, -1, -1):
        blocks = [
            model.sample_returns_given_state(j, n_samples, child_seed(seed, t, j))
            for j in range(m)
        ]
        returns = np.vstack(blocks)
        dm_next = np.repeat(d_minus[t + 1], n_samples)
        dp_next = np.repeat(d_plus[t + 1], n_samples)

        def make_task(s: int, direction: str):
            weights = np.repeat(model.transition[s] / n_samples, n_samples)
            cell = FioCellInput(returns, dm_next, dp_next, cone, direction, weights)
            cfg = replace(solver, seed=child_seed(seed, t, s, direction))

            def run():
                try:
                    return solve_cell(cell, cfg)
                except SolverError as err:
                    raise SolverError(
                        f"cell (t={t}, state={s}, direction={direction}): {err}",
                        best_k=err.best_k, best_value=err.best_value, residual=err.residual,
                    ) from err

            return run

        tasks = [make_task(s, direction) for s in range(m) for direction in (MINUS, PLUS)]
        outputs = _run_cells(tasks, workers)
        for idx, out in enumerate(outputs):
            s, direction = divmod(idx, 2)
            if direction == 0:
                d_minus[t, s] = out.d_star
                k_minus[t, s] = out.k_star
            else:
                d_plus[t, s] = out.d_star
                k_plus[t, s] = out.k_star
            diagnostics.append(
                {"t": t, "state": s, "direction": MINUS if direction == 0 else PLUS,
                 **out.diagnostics.to_json_dict()}
            )

    return DiscreteFioTable(
        horizon=horizon, n_states=m, n_assets=n,
        d_minus=d_minus, d_plus=d_plus, k_minus=k_minus, k_plus=k_plus,
        cone=cone, master_seed=seed, n_samples=n_samples, diagnostics=diagnostics,
    )


def backward_factor(
    model: LinearFactorModel,
    cone: ConeConstraint,
    horizon: int,
    grid: np.ndarray,
    n_samples: int,
    seed: int,
    fit_config: Optional[FitConfig] = None,
    k_mode: str = "resolve",
    solver: Optional[SolverConfig] = None,
    workers: int = 1,
    validation_warn: float = 0.01,
) -> ContinuousFioTable:
    """Backward recursion for the continuous-factor model.

    At each time step, solves both cells at every grid state from joint
    draws of (s_next, r_next), evaluating the fitted next-step opportunity
    functions at the sampled states, then fits the current step's scalar and
    vector functions over the grid.  Validation errors above
    ``validation_warn`` are logged and recorded, not fatal.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] < 2:
        raise ValueError("grid needs at least two states")
    if grid.shape[1] != model.n_factors:
        raise ValueError(
            f"grid states have dimension {grid.shape[1]}, expected {model.n_factors}"
        )
    solver = solver or SolverConfig()
    fit_config = fit_config or FitConfig()
    if k_mode not in ("resolve", "fit"):
        raise ValueError("k_mode must be 'resolve' or 'fit'")
    n_grid = grid.shape[0]
    n = model.n_assets

    raw_dm = np.ones((horizon, n_grid))
    raw_dp = np.ones((horizon, n_grid))
    raw_km = np.zeros((horizon, n_grid, n))
    raw_kp = np.zeros((horizon, n_grid, n))
    d_minus_fn: list = [None] * horizon
    d_plus_fn: list = [None] * horizon
    k_minus_fn: list = [None] * horizon
    k_plus_fn: list = [None] * horizon
    validation_errors: list = []
    diagnostics: list = []

    for t in range(horizon - 1, -1, -1):
        def make_task(j: int):
            scen = model.sample_scenarios(t, grid[j], n_samples, child_seed(seed, t, j))
            if t == horizon - 1:
                dm = np.ones(scen.n_samples)
                dp = np.ones(scen.n_samples)
            else:
                dm = d_minus_fn[t + 1].evaluate_batch(scen.states)[:, 0]
                dp = d_plus_fn[t + 1].evaluate_batch(scen.states)[:, 0]

            def run():
                outs = []
                for direction in (MINUS, PLUS):
                    cell = FioCellInput(scen.returns, dm, dp, cone, direction)
                    cfg = replace(solver, seed=child_seed(seed, t, j, direction))
                    try:
                        outs.append(solve_cell(cell, cfg))
                    except SolverError as err:
                        raise SolverError(
                            f"cell (t={t}, grid point {j}, direction={direction}): {err}",
                            best_k=err.best_k, best_value=err.best_value,
                            residual=err.residual,
                        ) from err
                return outs

            return run

        tasks = [make_task(j) for j in range(n_grid)]
        outputs = _run_cells(tasks, workers)
        for j, (out_m, out_p) in enumerate(outputs):
            raw_dm[t, j] = out_m.d_star
            raw_km[t, j] = out_m.k_star
            raw_dp[t, j] = out_p.d_star
            raw_kp[t, j] = out_p.k_star
            diagnostics.append({"t": t, "grid_index": j, "direction": MINUS,
                                **out_m.diagnostics.to_json_dict()})
            diagnostics.append({"t": t, "grid_index": j, "direction": PLUS,
                                **out_p.diagnostics.to_json_dict()})

        d_minus_fn[t] = fit_function(grid, raw_dm[t], fit_config, bounded=True)
        d_plus_fn[t] = fit_function(grid, raw_dp[t], fit_config, bounded=True)
        k_minus_fn[t] = fit_function(grid, raw_km[t], fit_config, bounded=False)
        k_plus_fn[t] = fit_function(grid, raw_kp[t], fit_config, bounded=False)
        errs = {
            "t": t,
            "d_minus": d_minus_fn[t].validation_error,
            "d_plus": d_plus_fn[t].validation_error,
            "k_minus": k_minus_fn[t].validation_error,
            "k_plus": k_plus_fn[t].validation_error,
        }
        validation_errors.append(errs)
        worst = max(errs["d_minus"], errs["d_plus"])
        if worst > validation_warn:
            logger.warning(
                "t=%d: opportunity-function validation error %.3g above %.3g",
                t, worst, validation_warn,
            )

    table = ContinuousFioTable(
        horizon=horizon, n_assets=n, n_factors=model.n_factors, grid=grid,
        d_minus_fn=d_minus_fn, d_plus_fn=d_plus_fn,
        k_minus_fn=k_minus_fn, k_plus_fn=k_plus_fn,
        raw_d_minus=raw_dm, raw_d_plus=raw_dp, raw_k_minus=raw_km, raw_k_plus=raw_kp,
        cone=cone, master_seed=seed, n_samples=n_samples, k_mode=k_mode,
        validation_errors=validation_errors, diagnostics=diagnostics, solver=solver,
    )
    table.attach_model(model)
    return table
