"""Shared fixtures: the four-asset regime-switching example and small
factor-model tables (session-scoped; the backward fits are the slow part)."""

import numpy as np
import pytest

from mmv import cones, fio
from mmv.approximator import FitConfig
from mmv.market import LinearFactorModel, MarkovChainModel

MARKOV_SEED = 20240901

RF_QUARTERLY = 1.003
MEAN_GOOD = np.array([0.167, 0.157, 0.057, 0.147])
MEAN_BAD = np.array([-0.193, -0.063, -0.073, -0.113])
COV_GOOD = 1e-2 * np.array(
    [
        [3.06, 0.12, 0.15, 0.47],
        [0.12, 3.19, 0.32, 0.27],
        [0.15, 0.32, 1.30, 0.41],
        [0.47, 0.27, 0.41, 2.22],
    ]
)
COV_BAD = 1e-2 * np.array(
    [
        [4.88, 0.36, 1.16, 1.94],
        [0.36, 3.69, 0.69, 0.64],
        [1.16, 0.69, 2.57, 1.41],
        [1.94, 0.64, 1.41, 5.80],
    ]
)
TRANSITION = np.array([[0.7, 0.3], [0.4, 0.6]])


def build_markov_example_model() -> MarkovChainModel:
    return MarkovChainModel(
        transition=TRANSITION,
        mean=np.stack([MEAN_GOOD, MEAN_BAD]),
        cov=np.stack([COV_GOOD, COV_BAD]),
        risk_free=RF_QUARTERLY,
    )


def nonneg_card2_cone() -> cones.ConeConstraint:
    return cones.intersect(cones.nonnegative(4), cones.cardinality(2, 4))


@pytest.fixture(scope="session")
def markov_example_model():
    return build_markov_example_model()


@pytest.fixture(scope="session")
def markov_example_table(markov_example_model):
    """Full-scale fit of the regime-switching example (T=12, L=10,000)."""
    return fio.backward_markov(
        markov_example_model,
        nonneg_card2_cone(),
        horizon=12,
        n_samples=10_000,
        seed=MARKOV_SEED,
    )


@pytest.fixture(scope="session")
def markov_small_table(markov_example_model):
    """Cheap fit of the same market for structural tests."""
    return fio.backward_markov(
        markov_example_model,
        nonneg_card2_cone(),
        horizon=4,
        n_samples=2_000,
        seed=77,
    )


def build_factor_1d_model() -> LinearFactorModel:
    return LinearFactorModel(
        alpha=[0.0],
        loadings=[[0.04]],
        mean_reversion=[[0.3]],
        sigma_eps=[[0.0049]],
        sigma_xi=[[0.04]],
        risk_free=1.0,
    )


@pytest.fixture(scope="session")
def factor_1d_table():
    """One factor, one asset, inverse-distance fitting (the 1-d default)."""
    model = build_factor_1d_model()
    grid = np.linspace(-2.5, 2.5, 25)[:, None]
    table = fio.backward_factor(
        model,
        cones.unconstrained(1),
        horizon=3,
        grid=grid,
        n_samples=4_000,
        seed=42,
        fit_config=FitConfig(method="inverse-distance"),
        k_mode="resolve",
    )
    return model, table


def build_factor_wide_model(seed: int = 31) -> LinearFactorModel:
    """Ten assets on six mean-reverting factors (empirical-study shape)."""
    rng = np.random.default_rng(seed)
    n, ns = 10, 6
    loadings = rng.normal(0.0, 0.05, (n, ns))
    mean_reversion = np.diag(rng.uniform(0.1, 0.5, ns))
    a_eps = rng.normal(0.0, 0.02, (n, n))
    sigma_eps = a_eps @ a_eps.T + 0.0015 * np.eye(n)
    sigma_xi = np.diag(rng.uniform(0.0005, 0.003, ns))
    return LinearFactorModel(
        alpha=rng.normal(0.002, 0.002, n),
        loadings=loadings,
        mean_reversion=mean_reversion,
        sigma_eps=sigma_eps,
        sigma_xi=sigma_xi,
        risk_free=1.002,
    )


@pytest.fixture(scope="session")
def factor_wide_table():
    """Neural-net-fitted table of the ten-asset factor market."""
    model = build_factor_wide_model()
    rng = np.random.default_rng(8)
    grid = rng.normal(0.0, 0.06, (50, model.n_factors))
    cone = cones.intersect(cones.nonnegative(10), cones.cardinality(2, 10))
    table = fio.backward_factor(
        model,
        cone,
        horizon=3,
        grid=grid,
        n_samples=300,
        seed=99,
        fit_config=FitConfig(method="feedforward-net", epochs=800, learning_rate=0.02, seed=5),
        k_mode="fit",
    )
    return model, table
