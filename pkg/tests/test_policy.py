"""Threshold policy assembly, frontier formulas, and the Sharpe diagnostic."""

import numpy as np
import pytest

from mmv import cones
from mmv.fio import DiscreteFioTable
from mmv.policy import (
    DegenerateFrontierError,
    InfeasibleTargetError,
    PrecommittedPolicy,
    efficient_frontier,
    lambda_star,
    mean_variance_of_optimum,
)

RF12 = 1.003**12


def toy_table(d0=0.8, k_minus=2.0, horizon=1, n_assets=1, cone=None):
    """Single-state table with constant values across time."""
    shape_d = (horizon + 1, 1)
    d = np.full(shape_d, d0)
    d[horizon] = 1.0
    k_m = np.full((horizon, 1, n_assets), k_minus)
    return DiscreteFioTable(
        horizon=horizon, n_states=1, n_assets=n_assets,
        d_minus=d.copy(), d_plus=d.copy(), k_minus=k_m, k_plus=-k_m,
        cone=cone or cones.unconstrained(n_assets), master_seed=0, n_samples=1,
    )


class TestLambdaStar:
    def test_target_equal_to_risk_free_growth_gives_zero(self):
        assert lambda_star(1.05, 1.0, 1.05, 0.4) == 0.0

    def test_paper_parameters_hand_arithmetic(self):
        # 0.32 * (1.178 - 1.003^12) / 0.68
        rho0 = RF12
        expected = 0.32 * (1.178 - rho0) / 0.68
        assert lambda_star(1.178, 1.0, rho0, 0.32) == pytest.approx(expected, rel=1e-15)
        assert expected == pytest.approx(0.06655, abs=2e-4)

    def test_no_opportunity_is_infeasible(self):
        with pytest.raises(InfeasibleTargetError):
            lambda_star(1.1, 1.0, 1.0, 1.0)

    def test_target_below_risk_free_is_infeasible(self):
        with pytest.raises(InfeasibleTargetError):
            lambda_star(0.9, 1.0, 1.0, 0.5)


class TestMeanVariance:
    def test_zero_weight_is_risk_free_point(self):
        p = mean_variance_of_optimum(0.0, 0.5, 1.0, 1.02)
        assert p.expected_wealth == 1.02
        assert p.variance == 0.0

    def test_hand_arithmetic_point(self):
        p = mean_variance_of_optimum(1.0, 0.32, 1.0, RF12)
        assert p.expected_wealth == pytest.approx(RF12 + 2.125, rel=1e-14)
        assert p.variance == pytest.approx(2.125, rel=1e-14)

    def test_frontier_identity_eliminates_weight(self):
        p = mean_variance_of_optimum(1.0, 0.32, 1.0, RF12)
        implied = 0.32 * (p.expected_wealth - RF12) ** 2 / (1 - 0.32)
        assert implied == pytest.approx(p.variance, rel=1e-12)


class TestFrontier:
    def test_risk_free_target_has_zero_variance(self):
        pts = efficient_frontier(0.5, 1.0, 1.02, [1.02])
        assert pts[0].variance == 0.0

    def test_unit_excess_with_point_eight(self):
        pts = efficient_frontier(0.8, 1.0, 1.0, [2.0])
        assert pts[0].variance == pytest.approx(4.0, rel=1e-14)

    def test_smaller_opportunity_value_dominates(self):
        lo = efficient_frontier(0.3, 1.0, 1.0, [1.5])[0].variance
        hi = efficient_frontier(0.6, 1.0, 1.0, [1.5])[0].variance
        assert lo < hi

    def test_degenerate_frontier(self):
        with pytest.raises(DegenerateFrontierError):
            efficient_frontier(1.0, 1.0, 1.0, [1.1])


class TestDecide:
    def test_on_target_growth_path_invests_nothing(self):
        table = toy_table()
        policy = PrecommittedPolicy(table, 1.2, 0, risk_free=1.0, lam=0.0)
        # lambda = 0 puts the threshold at current growth wealth exactly.
        pi = policy.decide(0, 1.2, 0)
        assert np.allclose(pi, 0.0)

    def test_hand_case_below_threshold(self):
        # k_minus = 2, flat rates, threshold 1.2: pi = -2 (1 - 1.2) = 0.4.
        table = toy_table(d0=0.5, k_minus=2.0)
        policy = PrecommittedPolicy(table, 1.0, 0, risk_free=1.0, lam=0.1)
        assert policy.threshold == pytest.approx(1.2, rel=1e-15)
        assert policy.decide(0, 1.0, 0)[0] == pytest.approx(0.4, rel=1e-12)

    def test_markov_example_direction(self, markov_example_table):
        policy = PrecommittedPolicy(
            markov_example_table, 1.0, 0, risk_free=1.003, target=1.178
        )
        pi = policy.decide(0, 1.0, 0)
        k = markov_example_table.k_minus[0, 0]
        # below the threshold the decision is a positive multiple of the
        # down allocation vector
        scale = pi[1] / k[1]
        assert scale > 0
        assert np.allclose(pi, scale * k, atol=1e-12)

    def test_positive_homogeneity_in_threshold_gap(self):
        table = toy_table(d0=0.5, k_minus=1.3)
        policy = PrecommittedPolicy(table, 1.0, 0, risk_free=1.0, lam=0.2)
        w = policy.threshold
        pi1 = policy.decide(0, w - 0.1, 0)
        pi2 = policy.decide(0, w - 0.2, 0)
        assert np.allclose(pi2, 2.0 * pi1, rtol=1e-10)

    def test_mode_equivalence(self, markov_example_table):
        rho0 = 1.003**12
        d0 = markov_example_table.d_minus[0, 0]
        lam = lambda_star(1.178, 1.0, rho0, d0)
        a = PrecommittedPolicy(markov_example_table, 1.0, 0, risk_free=1.003, target=1.178)
        b = PrecommittedPolicy(markov_example_table, 1.0, 0, risk_free=1.003, lam=lam)
        rng = np.random.default_rng(1)
        for _ in range(200):
            t = int(rng.integers(0, 12))
            x = float(rng.uniform(0.5, 2.0))
            s = int(rng.integers(0, 2))
            assert np.allclose(a.decide(t, x, s), b.decide(t, x, s), atol=1e-12)

    def test_decisions_are_cone_feasible(self, markov_example_table):
        policy = PrecommittedPolicy(markov_example_table, 1.0, 0, risk_free=1.003, target=1.178)
        cone = markov_example_table.cone
        rng = np.random.default_rng(2)
        for _ in range(10_000):
            t = int(rng.integers(0, 12))
            x = float(rng.uniform(0.2, 3.0))
            s = int(rng.integers(0, 2))
            assert cone.is_feasible(policy.decide(t, x, s), tol=1e-8)

    def test_batch_matches_scalar(self, markov_example_table):
        policy = PrecommittedPolicy(markov_example_table, 1.0, 0, risk_free=1.003, target=1.178)
        rng = np.random.default_rng(3)
        wealth = rng.uniform(0.5, 2.0, 64)
        states = rng.integers(0, 2, 64)
        batch, _ = policy.decide_batch(3, wealth, states)
        for i in range(64):
            assert np.allclose(batch[i], policy.decide(3, wealth[i], states[i]), atol=1e-14)

    def test_above_threshold_uses_up_vector(self):
        table = toy_table(d0=0.5, k_minus=2.0)
        policy = PrecommittedPolicy(table, 1.0, 0, risk_free=1.0, lam=0.1)
        x = policy.threshold + 0.3
        pi = policy.decide(0, x, 0)
        # k_plus = -2 here, gap = 0.3: pi = -0.6
        assert pi[0] == pytest.approx(-0.6, rel=1e-12)

    def test_exactly_one_mode_required(self):
        table = toy_table()
        with pytest.raises(ValueError):
            PrecommittedPolicy(table, 1.0, 0, risk_free=1.0)
        with pytest.raises(ValueError):
            PrecommittedPolicy(table, 1.0, 0, risk_free=1.0, lam=0.1, target=1.1)

    def test_negative_lambda_rejected_publicly(self):
        table = toy_table()
        with pytest.raises(ValueError):
            PrecommittedPolicy(table, 1.0, 0, risk_free=1.0, lam=-0.5)
        internal = PrecommittedPolicy(
            table, 1.0, 0, risk_free=1.0, lam=-0.05, _allow_negative_lambda=True
        )
        assert internal.lam == -0.05


class TestConditionalSharpe:
    def test_no_opportunity_means_zero_ratio(self):
        table = toy_table(d0=1.0)
        policy = PrecommittedPolicy(table, 1.0, 0, risk_free=1.0, lam=0.0)
        assert policy.conditional_sharpe(0, 1.0, 0) == 0.0

    def test_point_three_two_value(self):
        table = toy_table(d0=0.32)
        policy = PrecommittedPolicy(table, 1.0, 0, risk_free=1.0, target=1.1)
        assert policy.conditional_sharpe(0, 1.0, 0) == pytest.approx(
            np.sqrt(0.68 / 0.32), rel=1e-12
        )

    def test_half_gives_unit_ratio(self):
        table = toy_table(d0=0.5)
        policy = PrecommittedPolicy(table, 1.0, 0, risk_free=1.0, target=1.1)
        assert policy.conditional_sharpe(0, 1.0, 0) == pytest.approx(1.0, rel=1e-12)

    def test_above_target_branch_uses_up_value(self):
        table = toy_table(d0=0.5)
        table.d_plus[0, 0] = 0.9
        policy = PrecommittedPolicy(table, 1.0, 0, risk_free=1.0, target=1.1)
        high = policy.conditional_sharpe(0, 5.0, 0)
        assert high == pytest.approx(np.sqrt(0.1 / 0.9), rel=1e-12)
