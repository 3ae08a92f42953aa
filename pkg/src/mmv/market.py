"""Return and state dynamics for the portfolio engine.

Two concrete market models are provided:

* ``MarkovChainModel`` -- the market regime s_t follows a discrete-time
  Markov chain with M states; conditional on the next regime j the excess
  return vector is multivariate normal with per-regime mean c(j) and
  covariance Sigma(j).
* ``LinearFactorModel`` -- excess returns load linearly on a vector of
  observable factors that mean-revert:

      r_t = alpha + B s_t + eps_t,      s_t = (I - Phi) s_{t-1} + xi_t,

  with independent Gaussian noises eps_t ~ N(0, Sigma_eps) and
  xi_t ~ N(0, Sigma_xi).

Both models expose one-step joint sampling of (s_{t+1}, r_{t+1}) given the
current state, exact conditional moments for analytic oracles, and batched
path simulation.  All sampling is pure given (inputs, seed).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .util import child_seed

logger = logging.getLogger("mmv.market")

RiskFree = Union[float, Sequence[float]]


class DataFormatError(ValueError):
    """Malformed CSV input (message carries the offending line number)."""


class CalibrationError(ValueError):
    """Regression inputs unusable (message names the offending column)."""


def _check_spd(matrix: np.ndarray, what: str) -> None:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{what} must be square, got shape {matrix.shape}")
    if not np.allclose(matrix, matrix.T, atol=1e-10):
        raise ValueError(f"{what} must be symmetric")
    eigs = np.linalg.eigvalsh(matrix)
    floor = 1e-12 * max(np.trace(matrix), 1e-300)
    if eigs.min() < floor:
        raise ValueError(
            f"{what} is not positive definite (min eigenvalue {eigs.min():.3e}, "
            f"floor {floor:.3e}); conditional covariances must be nonsingular"
        )


def _psd_factor(matrix: np.ndarray, what: str) -> np.ndarray:
    """Square root factor of a PSD matrix (tolerates zero eigenvalues)."""
    matrix = np.asarray(matrix, dtype=float)
    if not np.allclose(matrix, matrix.T, atol=1e-10):
        raise ValueError(f"{what} must be symmetric")
    eigs, vecs = np.linalg.eigh(matrix)
    if eigs.min() < -1e-10 * max(abs(eigs).max(), 1.0):
        raise ValueError(f"{what} must be positive semidefinite")
    return vecs * np.sqrt(np.clip(eigs, 0.0, None))


@dataclass(frozen=True)
class ScenarioSet:
    """One-step joint samples (s_next, r_next) drawn conditional on a state.

    ``states`` holds next-state values: an int array of regime indices for
    Markov models, or an (L, N_s) array of factor vectors.  Regeneration
    with the same inputs is bit-identical.
    """

    t: int
    origin: object
    states: np.ndarray
    returns: np.ndarray
    seed: int

    def __post_init__(self):
        if len(self.returns) < 1:
            raise ValueError("a scenario set needs at least one sample")
        if len(self.states) != len(self.returns):
            raise ValueError("states and returns must have matching sample counts")

    @property
    def n_samples(self) -> int:
        return len(self.returns)


class MarkovChainModel:
    """Regime-switching market on M discrete states.

    Parameters
    ----------
    transition : (M, M) row-stochastic matrix; entry [i, j] is the one-step
        probability of moving from regime i to regime j.
    mean : (M, N) per-regime excess-return means.
    cov : (M, N, N) per-regime covariance matrices, each symmetric positive
        definite (near-singular matrices are rejected at construction).
    risk_free : per-period gross risk-free return, scalar or sequence.
    """

    def __init__(
        self,
        transition: np.ndarray,
        mean: np.ndarray,
        cov: np.ndarray,
        risk_free: RiskFree = 1.0,
    ):
        transition = np.asarray(transition, dtype=float)
        mean = np.atleast_2d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 2:
            cov = cov[None, :, :]
        m = transition.shape[0]
        if transition.shape != (m, m):
            raise ValueError(f"transition matrix must be square, got {transition.shape}")
        if np.any(transition < -1e-15) or np.any(transition > 1 + 1e-15):
            raise ValueError("transition probabilities must lie in [0, 1]")
        rows = transition.sum(axis=1)
        if np.abs(rows - 1.0).max() > 1e-12:
            raise ValueError(f"transition rows must sum to 1 (max deviation {np.abs(rows-1).max():.2e})")
        if mean.shape[0] != m or cov.shape[0] != m:
            raise ValueError("mean and cov must provide one entry per state")
        n = mean.shape[1]
        if cov.shape[1:] != (n, n):
            raise ValueError(f"cov blocks must be {n}x{n}, got {cov.shape[1:]}")
        for j in range(m):
            _check_spd(cov[j], f"covariance of state {j}")
        self.transition = transition
        self.mean = mean
        self.cov = cov
        self.risk_free = risk_free
        self._chol = np.stack([np.linalg.cholesky(cov[j]) for j in range(m)])

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_assets(self) -> int:
        return self.mean.shape[1]

    def _check_origin(self, origin) -> int:
        origin = int(origin)
        if not 0 <= origin < self.n_states:
            raise ValueError(f"origin state {origin} outside [0, {self.n_states})")
        return origin

    def sample_returns_given_state(self, state: int, count: int, seed: int) -> np.ndarray:
        """Draws of r ~ N(c(state), Sigma(state)); the building block of the
        transition-probability-weighted backward recursion."""
        state = self._check_origin(state)
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((count, self.n_assets))
        return self.mean[state] + z @ self._chol[state].T

    def sample_scenarios(self, t: int, origin: int, count: int, seed: int) -> ScenarioSet:
        """Joint one-step draws of (s_next, r_next) given s_t = origin."""
        origin = self._check_origin(origin)
        if count < 1:
            raise ValueError("sample count must be >= 1")
        rng = np.random.default_rng(seed)
        nxt = rng.choice(self.n_states, size=count, p=self.transition[origin])
        z = rng.standard_normal((count, self.n_assets))
        scaled = np.einsum("lij,lj->li", self._chol[nxt], z)
        returns = self.mean[nxt] + scaled
        return ScenarioSet(t=t, origin=origin, states=nxt, returns=returns, seed=seed)

    def conditional_moments(self, origin: int):
        """Exact mixture moments of r_{t+1} given s_t = origin.

        Returns (mean, covariance, second moment); the mixture runs over the
        transition row of the origin state.
        """
        origin = self._check_origin(origin)
        p = self.transition[origin]
        mean = p @ self.mean
        second = np.einsum("j,jab->ab", p, self.cov) + np.einsum(
            "j,ja,jb->ab", p, self.mean, self.mean
        )
        cov = second - np.outer(mean, mean)
        return mean, cov, second

    def stationary_distribution(self) -> np.ndarray:
        vals, vecs = np.linalg.eig(self.transition.T)
        idx = int(np.argmin(np.abs(vals - 1.0)))
        pi = np.real(vecs[:, idx])
        pi = np.abs(pi)
        return pi / pi.sum()

    def iid_stationary_model(self) -> "MarkovChainModel":
        """Benchmark variant that ignores regime persistence: every row of
        the transition matrix is replaced by the stationary distribution, so
        states are independent over time with the same marginal mixture."""
        pi = self.stationary_distribution()
        rows = np.tile(pi, (self.n_states, 1))
        return MarkovChainModel(rows, self.mean, self.cov, self.risk_free)

    def simulate_paths(self, horizon: int, n_paths: int, seed: int, initial_state: int):
        """Vectorized path simulation.

        Returns (states, returns) with shapes (n_paths, horizon+1) and
        (n_paths, horizon, N); returns[:, t] realizes r_{t+1} given states[:, t].
        """
        initial_state = self._check_origin(initial_state)
        rng = np.random.default_rng(seed)
        states = np.empty((n_paths, horizon + 1), dtype=np.int64)
        states[:, 0] = initial_state
        returns = np.empty((n_paths, horizon, self.n_assets))
        cum = np.cumsum(self.transition, axis=1)
        for t in range(horizon):
            u = rng.random(n_paths)
            nxt = np.empty(n_paths, dtype=np.int64)
            for j in range(self.n_states):
                mask = states[:, t] == j
                if mask.any():
                    nxt[mask] = np.searchsorted(cum[j], u[mask], side="right")
            np.clip(nxt, 0, self.n_states - 1, out=nxt)
            states[:, t + 1] = nxt
            z = rng.standard_normal((n_paths, self.n_assets))
            returns[:, t] = self.mean[nxt] + np.einsum("lij,lj->li", self._chol[nxt], z)
        return states, returns

    def to_json_dict(self) -> dict:
        return {
            "type": "markov",
            "transition": self.transition.tolist(),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "risk_free": self.risk_free if np.isscalar(self.risk_free) else list(self.risk_free),
        }


class LinearFactorModel:
    """Mean-reverting observable-factor model of excess returns."""

    def __init__(
        self,
        alpha: np.ndarray,
        loadings: np.ndarray,
        mean_reversion: np.ndarray,
        sigma_eps: np.ndarray,
        sigma_xi: np.ndarray,
        risk_free: RiskFree = 1.0,
        asset_names: Optional[list[str]] = None,
        factor_names: Optional[list[str]] = None,
    ):
        alpha = np.asarray(alpha, dtype=float).ravel()
        loadings = np.atleast_2d(np.asarray(loadings, dtype=float))
        mean_reversion = np.atleast_2d(np.asarray(mean_reversion, dtype=float))
        n, ns = loadings.shape
        if alpha.shape != (n,):
            raise ValueError(f"alpha has shape {alpha.shape}, expected ({n},)")
        if mean_reversion.shape != (ns, ns):
            raise ValueError(f"mean-reversion matrix must be {ns}x{ns}")
        _check_spd(np.asarray(sigma_eps, dtype=float), "sigma_eps")
        self.alpha = alpha
        self.loadings = loadings
        self.mean_reversion = mean_reversion
        self.sigma_eps = np.asarray(sigma_eps, dtype=float)
        self.sigma_xi = np.asarray(sigma_xi, dtype=float)
        self.risk_free = risk_free
        self.asset_names = asset_names
        self.factor_names = factor_names
        self._chol_eps = np.linalg.cholesky(self.sigma_eps)
        self._factor_xi = _psd_factor(self.sigma_xi, "sigma_xi")
        self._persistence = np.eye(ns) - mean_reversion
        radius = self.state_spectral_radius
        if radius >= 1.0:
            logger.warning(
                "factor persistence spectral radius %.4f >= 1: state process is nonstationary",
                radius,
            )

    @property
    def n_assets(self) -> int:
        return self.loadings.shape[0]

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]

    @property
    def state_spectral_radius(self) -> float:
        """Spectral radius of (I - Phi); below 1 means mean reversion."""
        return float(np.abs(np.linalg.eigvals(self._persistence)).max())

    def _check_origin(self, origin) -> np.ndarray:
        origin = np.asarray(origin, dtype=float).ravel()
        if origin.shape != (self.n_factors,):
            raise ValueError(
                f"origin state has shape {origin.shape}, expected ({self.n_factors},)"
            )
        return origin

    def sample_scenarios(self, t: int, origin: np.ndarray, count: int, seed: int) -> ScenarioSet:
        origin = self._check_origin(origin)
        if count < 1:
            raise ValueError("sample count must be >= 1")
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal((count, self.n_factors)) @ self._factor_xi.T
        s_next = origin @ self._persistence.T + xi
        eps = rng.standard_normal((count, self.n_assets)) @ self._chol_eps.T
        returns = self.alpha + s_next @ self.loadings.T + eps
        return ScenarioSet(t=t, origin=origin, states=s_next, returns=returns, seed=seed)

    def conditional_moments(self, origin: np.ndarray):
        """Exact Gaussian moments of r_{t+1} given s_t."""
        origin = self._check_origin(origin)
        mean = self.alpha + self.loadings @ (self._persistence @ origin)
        cov = self.loadings @ self.sigma_xi @ self.loadings.T + self.sigma_eps
        second = np.outer(mean, mean) + cov
        return mean, cov, second

    def simulate_paths(self, horizon: int, n_paths: int, seed: int, initial_state: np.ndarray):
        initial_state = self._check_origin(initial_state)
        rng = np.random.default_rng(seed)
        states = np.empty((n_paths, horizon + 1, self.n_factors))
        states[:, 0] = initial_state
        returns = np.empty((n_paths, horizon, self.n_assets))
        for t in range(horizon):
            xi = rng.standard_normal((n_paths, self.n_factors)) @ self._factor_xi.T
            states[:, t + 1] = states[:, t] @ self._persistence.T + xi
            eps = rng.standard_normal((n_paths, self.n_assets)) @ self._chol_eps.T
            returns[:, t] = self.alpha + states[:, t + 1] @ self.loadings.T + eps
        return states, returns

    def to_json_dict(self) -> dict:
        out = {
            "type": "linear_factor",
            "alpha": self.alpha.tolist(),
            "loadings": self.loadings.tolist(),
            "mean_reversion": self.mean_reversion.tolist(),
            "sigma_eps": self.sigma_eps.tolist(),
            "sigma_xi": self.sigma_xi.tolist(),
            "risk_free": self.risk_free if np.isscalar(self.risk_free) else list(self.risk_free),
        }
        if self.asset_names:
            out["asset_names"] = self.asset_names
        if self.factor_names:
            out["factor_names"] = self.factor_names
        return out

    @classmethod
    def from_json_dict(cls, spec: dict) -> "LinearFactorModel":
        return cls(
            alpha=np.asarray(spec["alpha"], dtype=float),
            loadings=np.asarray(spec["loadings"], dtype=float),
            mean_reversion=np.asarray(spec["mean_reversion"], dtype=float),
            sigma_eps=np.asarray(spec["sigma_eps"], dtype=float),
            sigma_xi=np.asarray(spec["sigma_xi"], dtype=float),
            risk_free=spec.get("risk_free", 1.0),
            asset_names=spec.get("asset_names"),
            factor_names=spec.get("factor_names"),
        )


MarketModel = Union[MarkovChainModel, LinearFactorModel]


@dataclass(frozen=True)
class CumulativeRiskFree:
    """Cumulative gross risk-free growth rho_t = prod_{k=t}^{T-1} r0_{k+1}.

    ``rates[t]`` is the gross per-period return r0_{t+1} earned over period
    t -> t+1; ``rho[T] = 1`` exactly and rho_t = rates[t] * rho_{t+1}.
    """

    rates: np.ndarray
    rho: np.ndarray

    @classmethod
    def build(cls, risk_free: RiskFree, horizon: int) -> "CumulativeRiskFree":
        if np.isscalar(risk_free):
            rates = np.full(horizon, float(risk_free))
        else:
            rates = np.asarray(risk_free, dtype=float).ravel()
            if rates.shape != (horizon,):
                raise ValueError(
                    f"risk-free sequence has length {rates.shape[0]}, expected {horizon}"
                )
        if np.any(rates <= 0):
            raise ValueError("gross risk-free returns must be positive")
        rho = np.ones(horizon + 1)
        for t in range(horizon - 1, -1, -1):
            rho[t] = rates[t] * rho[t + 1]
        return cls(rates=rates, rho=rho)

    def rate(self, t: int) -> float:
        return float(self.rates[t])


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    n_obs: int
    r_squared_returns: np.ndarray
    r_squared_states: np.ndarray
    demeaned_factors: bool
    factor_mean: Optional[np.ndarray] = None

    def to_json_dict(self) -> dict:
        out = {
            "n_obs": self.n_obs,
            "r_squared_returns": self.r_squared_returns.tolist(),
            "r_squared_states": self.r_squared_states.tolist(),
            "demeaned_factors": self.demeaned_factors,
        }
        if self.factor_mean is not None:
            out["factor_mean"] = self.factor_mean.tolist()
        return out


def _name_rank_deficient_column(design: np.ndarray, names: list[str]) -> str:
    rank = 0
    for j in range(design.shape[1]):
        new_rank = np.linalg.matrix_rank(design[:, : j + 1])
        if new_rank == rank:
            return names[j]
        rank = new_rank
    return names[-1]


def calibrate_linear_factor(
    returns: np.ndarray,
    factors: np.ndarray,
    risk_free: RiskFree = 1.0,
    demean_factors: bool = False,
    asset_names: Optional[list[str]] = None,
    factor_names: Optional[list[str]] = None,
):
    """Ordinary-least-squares calibration of the linear factor model.

    Regresses r_t on contemporaneous s_t (with intercept) for (alpha, B) and
    s_t on s_{t-1} (no intercept, matching the stated state equation) for the
    persistence matrix; residual covariances become sigma_eps and sigma_xi.

    Returns (LinearFactorModel, CalibrationReport).
    """
    returns = np.atleast_2d(np.asarray(returns, dtype=float))
    factors = np.atleast_2d(np.asarray(factors, dtype=float))
    t_obs, n = returns.shape
    ns = factors.shape[1]
    if factors.shape[0] != t_obs:
        raise CalibrationError(
            f"returns have {t_obs} rows but factors have {factors.shape[0]}"
        )
    if t_obs < ns + 2:
        raise CalibrationError(f"need at least {ns + 2} observations, got {t_obs}")
    fnames = factor_names or [f"factor_{j}" for j in range(ns)]

    factor_mean = None
    if demean_factors:
        factor_mean = factors.mean(axis=0)
        factors = factors - factor_mean

    # Return equation: r_t = alpha + B s_t + eps_t.
    design = np.column_stack([np.ones(t_obs), factors])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        offender = _name_rank_deficient_column(design, ["intercept"] + list(fnames))
        raise CalibrationError(f"return-equation regressors are rank deficient at column '{offender}'")
    beta, *_ = np.linalg.lstsq(design, returns, rcond=None)
    alpha = beta[0]
    loadings = beta[1:].T
    resid = returns - design @ beta
    dof = max(t_obs - (ns + 1), 1)
    sigma_eps = resid.T @ resid / dof
    ss_res = (resid**2).sum(axis=0)
    centered = returns - returns.mean(axis=0)
    ss_tot = (centered**2).sum(axis=0)
    r2_returns = 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, np.nan)

    # State equation: s_t = (I - Phi) s_{t-1} + xi_t, no intercept.
    x_lag = factors[:-1]
    y_cur = factors[1:]
    if np.linalg.matrix_rank(x_lag) < ns:
        offender = _name_rank_deficient_column(x_lag, list(fnames))
        raise CalibrationError(f"state-equation regressors are rank deficient at column '{offender}'")
    persistence_t, *_ = np.linalg.lstsq(x_lag, y_cur, rcond=None)
    persistence = persistence_t.T
    resid_s = y_cur - x_lag @ persistence_t
    dof_s = max(t_obs - 1 - ns, 1)
    sigma_xi = resid_s.T @ resid_s / dof_s
    r2_states = 1.0 - (resid_s**2).sum(axis=0) / np.maximum((y_cur**2).sum(axis=0), 1e-300)

    model = LinearFactorModel(
        alpha=alpha,
        loadings=loadings,
        mean_reversion=np.eye(ns) - persistence,
        sigma_eps=sigma_eps,
        sigma_xi=sigma_xi,
        risk_free=risk_free,
        asset_names=asset_names,
        factor_names=factor_names,
    )
    report = CalibrationReport(
        n_obs=t_obs,
        r_squared_returns=np.asarray(r2_returns),
        r_squared_states=np.asarray(r2_states),
        demeaned_factors=demean_factors,
        factor_mean=factor_mean,
    )
    return model, report


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def read_timeseries_csv(path: str):
    """Read a CSV with a header row, first column an ISO date, then floats.

    Returns (dates, values, column_names).  Values are per-period simple
    excess returns (or factor levels) as decimals.
    """
    dates: list[str] = []
    rows: list[list[float]] = []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: file is empty") from None
        if len(header) < 2:
            raise DataFormatError(f"{path}:1: need a date column plus at least one value column")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {width} columns, found {len(row)}"
                )
            dates.append(row[0].strip())
            try:
                rows.append([float(cell) for cell in row[1:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return dates, np.asarray(rows, dtype=float), [h.strip() for h in header[1:]]


def join_on_dates(dates_a: list[str], values_a: np.ndarray, dates_b: list[str], values_b: np.ndarray):
    """Inner-join two dated series; any unmatched date is an error."""
    set_a, set_b = set(dates_a), set(dates_b)
    for d in dates_a:
        if d not in set_b:
            raise DataFormatError(f"date {d} present in the first file but missing from the second")
    for d in dates_b:
        if d not in set_a:
            raise DataFormatError(f"date {d} present in the second file but missing from the first")
    order_b = {d: i for i, d in enumerate(dates_b)}
    idx_b = [order_b[d] for d in dates_a]
    return dates_a, values_a, values_b[idx_b]
