"""Market models: sampling determinism, conditional moments, calibration,
and CSV ingestion."""

import numpy as np
import pytest
from scipy import stats as sstats

from mmv.market import (
    CalibrationError,
    CumulativeRiskFree,
    DataFormatError,
    LinearFactorModel,
    MarkovChainModel,
    calibrate_linear_factor,
    join_on_dates,
    read_timeseries_csv,
)

from conftest import build_markov_example_model


def two_state_model():
    return build_markov_example_model()


class TestScenarioSampling:
    def test_absorbing_chain_stays_put(self):
        model = MarkovChainModel(
            transition=np.eye(2),
            mean=np.array([[0.1], [-0.1]]),
            cov=np.array([[[0.04]], [[0.04]]]),
        )
        scen = model.sample_scenarios(0, 1, 500, seed=3)
        assert np.all(scen.states == 1)

    def test_regeneration_is_bit_identical(self):
        model = two_state_model()
        a = model.sample_scenarios(2, 0, 1000, seed=99)
        b = model.sample_scenarios(2, 0, 1000, seed=99)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.returns, b.returns)
        c = model.sample_scenarios(2, 0, 1000, seed=100)
        assert not np.array_equal(a.returns, c.returns)

    def test_transition_frequency_from_good_state(self):
        # Persistence 0.7 out of the first regime, checked at L = 10,000.
        model = two_state_model()
        scen = model.sample_scenarios(0, 0, 10_000, seed=5)
        frac = float((scen.states == 0).mean())
        assert abs(frac - 0.7) <= 0.01

    def test_empirical_frequencies_pass_chi_square(self):
        model = two_state_model()
        scen = model.sample_scenarios(0, 1, 100_000, seed=8)
        counts = np.bincount(scen.states, minlength=2)
        expected = model.transition[1] * 100_000
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < sstats.chi2.ppf(0.999, df=1)

    def test_pinned_factor_state_gives_zero_mean_noise(self):
        model = LinearFactorModel(
            alpha=[0.0, 0.0],
            loadings=[[0.5, 0.1], [0.0, 0.3]],
            mean_reversion=np.eye(2),
            sigma_eps=0.01 * np.eye(2),
            sigma_xi=np.zeros((2, 2)),
        )
        scen = model.sample_scenarios(0, [1.3, -0.4], 50_000, seed=21)
        assert np.allclose(scen.states, 0.0)
        assert np.abs(scen.returns.mean(axis=0)).max() < 3 * 0.1 / np.sqrt(50_000)

    def test_invalid_origin_raises(self):
        model = two_state_model()
        with pytest.raises(ValueError):
            model.sample_scenarios(0, 5, 10, seed=0)
        factor = LinearFactorModel(
            alpha=[0.0], loadings=[[1.0]], mean_reversion=[[0.5]],
            sigma_eps=[[0.01]], sigma_xi=[[0.01]],
        )
        with pytest.raises(ValueError):
            factor.sample_scenarios(0, [0.0, 1.0], 10, seed=0)


class TestConditionalMoments:
    def test_degenerate_mixture_returns_state_parameters(self):
        model = MarkovChainModel(
            transition=np.array([[1.0, 0.0], [0.5, 0.5]]),
            mean=np.array([[0.1, 0.2], [-0.1, 0.0]]),
            cov=np.stack([np.eye(2) * 0.04, np.eye(2) * 0.09]),
        )
        mean, cov, second = model.conditional_moments(0)
        assert np.allclose(mean, [0.1, 0.2])
        assert np.allclose(cov, np.eye(2) * 0.04)

    def test_mixture_mean_is_transition_weighted(self):
        model = two_state_model()
        mean, _, _ = model.conditional_moments(0)
        expected = 0.7 * model.mean[0] + 0.3 * model.mean[1]
        assert np.allclose(mean, expected, atol=1e-14)

    def test_markov_moments_match_monte_carlo(self):
        model = two_state_model()
        mean, cov, second = model.conditional_moments(0)
        scen = model.sample_scenarios(0, 0, 100_000, seed=17)
        mc_mean = scen.returns.mean(axis=0)
        se = scen.returns.std(axis=0, ddof=1) / np.sqrt(scen.n_samples)
        assert np.all(np.abs(mc_mean - mean) <= 3 * se)
        mc_second = scen.returns.T @ scen.returns / scen.n_samples
        prods = scen.returns[:, :, None] * scen.returns[:, None, :]
        se2 = prods.std(axis=0, ddof=1) / np.sqrt(scen.n_samples)
        assert np.all(np.abs(mc_second - second) <= 3 * se2 + 1e-12)

    def test_factor_moments_match_symbolic_expansion(self):
        rng = np.random.default_rng(2)
        loadings = rng.normal(0, 0.4, (3, 2))
        a = rng.normal(0, 0.3, (3, 3))
        sigma_eps = a @ a.T + 0.01 * np.eye(3)
        sigma_xi = np.diag([0.02, 0.05])
        phi = np.array([[0.2, 0.0], [0.1, 0.4]])
        model = LinearFactorModel(
            alpha=[0.01, -0.02, 0.005], loadings=loadings, mean_reversion=phi,
            sigma_eps=sigma_eps, sigma_xi=sigma_xi,
        )
        s = np.array([0.7, -1.1])
        mean, cov, second = model.conditional_moments(s)
        expected_mean = model.alpha + loadings @ ((np.eye(2) - phi) @ s)
        assert np.allclose(mean, expected_mean, atol=1e-14)
        expected_second = np.outer(expected_mean, expected_mean) + loadings @ sigma_xi @ loadings.T + sigma_eps
        assert np.allclose(second, expected_second, atol=1e-14)

    def test_factor_moments_match_monte_carlo_to_three_digits(self):
        model = LinearFactorModel(
            alpha=[0.02], loadings=[[0.5]], mean_reversion=[[0.3]],
            sigma_eps=[[0.04]], sigma_xi=[[0.01]],
        )
        s = np.array([0.5])
        mean, cov, second = model.conditional_moments(s)
        scen = model.sample_scenarios(0, s, 1_000_000, seed=4)
        assert abs(scen.returns.mean() - mean[0]) < 1e-3 * max(1.0, abs(mean[0]))
        assert abs((scen.returns**2).mean() - second[0, 0]) < 5e-3 * second[0, 0]


class TestRiskFree:
    def test_rho_recursion_holds_exactly(self):
        rho = CumulativeRiskFree.build(1.003, 12)
        assert rho.rho[12] == 1.0
        for t in range(12):
            assert rho.rho[t] == rho.rates[t] * rho.rho[t + 1]

    def test_sequence_rates(self):
        rho = CumulativeRiskFree.build([1.01, 1.02, 1.00], 3)
        assert rho.rho[0] == pytest.approx(1.01 * 1.02, rel=1e-15)
        with pytest.raises(ValueError):
            CumulativeRiskFree.build([1.01], 3)


class TestValidation:
    def test_transition_rows_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            MarkovChainModel(
                transition=np.array([[0.6, 0.3], [0.4, 0.6]]),
                mean=np.zeros((2, 1)), cov=np.stack([np.eye(1), np.eye(1)]),
            )

    def test_near_singular_covariance_rejected(self):
        cov = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(ValueError, match="positive definite"):
            MarkovChainModel(
                transition=np.array([[1.0]]), mean=np.zeros((1, 2)), cov=cov[None],
            )

    def test_spectral_radius_reported_not_enforced(self):
        model = LinearFactorModel(
            alpha=[0.0], loadings=[[1.0]], mean_reversion=[[-0.5]],
            sigma_eps=[[0.01]], sigma_xi=[[0.01]],
        )
        assert model.state_spectral_radius == pytest.approx(1.5)


class TestCalibration:
    @staticmethod
    def simulate(model, t_obs, seed, s0=None):
        rng = np.random.default_rng(seed)
        ns, n = model.n_factors, model.n_assets
        s = np.zeros(ns) if s0 is None else s0
        factors = np.empty((t_obs, ns))
        returns = np.empty((t_obs, n))
        persistence = np.eye(ns) - model.mean_reversion
        chol_xi = np.linalg.cholesky(model.sigma_xi + 1e-18 * np.eye(ns))
        chol_eps = np.linalg.cholesky(model.sigma_eps + 1e-18 * np.eye(n))
        for t in range(t_obs):
            s = persistence @ s + chol_xi @ rng.standard_normal(ns)
            factors[t] = s
            returns[t] = model.alpha + model.loadings @ s + chol_eps @ rng.standard_normal(n)
        return returns, factors

    def test_noiseless_recovery_is_exact(self):
        # Both noises zero: the state spirals in deterministically from s_0
        # (not an eigenvector, so the lag pairs have full rank) and every
        # regression is exact.
        alpha = np.array([0.01, -0.02])
        loadings = np.array([[0.5, -0.2], [0.3, 0.4]])
        mean_reversion = np.array([[0.2, -0.1], [0.05, 0.3]])
        persistence = np.eye(2) - mean_reversion
        s = np.array([1.0, -0.7])
        factors = np.empty((25, 2))
        for t in range(25):
            s = persistence @ s
            factors[t] = s
        returns = alpha + factors @ loadings.T
        model, report = calibrate_linear_factor(returns, factors)
        assert np.allclose(model.alpha, alpha, atol=1e-8)
        assert np.allclose(model.loadings, loadings, atol=1e-8)
        assert np.allclose(model.mean_reversion, mean_reversion, atol=1e-8)
        assert np.all(report.r_squared_returns > 1 - 1e-12)

    def test_noise_error_shrinks_with_sample_size(self):
        # Root-n consistency: ten times the data should cut the parameter
        # error by roughly sqrt(10); allow generous slack.
        truth = LinearFactorModel(
            alpha=[0.01], loadings=[[0.6]], mean_reversion=[[0.25]],
            sigma_eps=[[0.02]], sigma_xi=[[0.05]],
        )
        errs = {}
        for t_obs in (500, 5000):
            acc = 0.0
            for rep in range(4):
                returns, factors = self.simulate(truth, t_obs, seed=100 + rep)
                model, _ = calibrate_linear_factor(returns, factors)
                acc += abs(model.loadings[0, 0] - 0.6) + abs(
                    model.mean_reversion[0, 0] - 0.25
                )
            errs[t_obs] = acc / 4
        assert errs[5000] < errs[500] * 0.6

    def test_empirical_study_shape(self):
        # Ten industry columns on six factors, monthly scale, 731 rows.
        truth = build_wide_truth()
        returns, factors = self.simulate(truth, 731, seed=9)
        model, report = calibrate_linear_factor(returns, factors)
        assert model.loadings.shape == (10, 6)
        assert report.n_obs == 731
        assert report.r_squared_returns.shape == (10,)

    def test_rank_deficiency_names_offending_column(self):
        rng = np.random.default_rng(3)
        factors = rng.normal(0, 1, (100, 3))
        factors[:, 2] = 2.0 * factors[:, 0]  # duplicate direction
        returns = rng.normal(0, 1, (100, 2))
        with pytest.raises(CalibrationError, match="factor_2"):
            calibrate_linear_factor(returns, factors)

    def test_too_few_observations(self):
        with pytest.raises(CalibrationError, match="at least"):
            calibrate_linear_factor(np.zeros((4, 2)), np.zeros((4, 3)))

    def test_demeaning_switch_records_mean(self):
        truth = LinearFactorModel(
            alpha=[0.01], loadings=[[0.6]], mean_reversion=[[0.25]],
            sigma_eps=[[0.02]], sigma_xi=[[0.05]],
        )
        returns, factors = self.simulate(truth, 600, seed=5)
        factors = factors + 0.4
        _, report = calibrate_linear_factor(returns, factors, demean_factors=True)
        assert report.factor_mean is not None
        assert abs(report.factor_mean[0] - factors.mean()) < 1e-12


def build_wide_truth():
    rng = np.random.default_rng(44)
    n, ns = 10, 6
    a = rng.normal(0, 0.05, (n, n))
    return LinearFactorModel(
        alpha=rng.normal(0, 0.01, n),
        loadings=rng.normal(0, 0.3, (n, ns)),
        mean_reversion=np.diag(rng.uniform(0.1, 0.6, ns)),
        sigma_eps=a @ a.T + 0.005 * np.eye(n),
        sigma_xi=np.diag(rng.uniform(0.001, 0.01, ns)),
    )


class TestCsv:
    def test_round_trip_and_join(self, tmp_path):
        ra = tmp_path / "returns.csv"
        fa = tmp_path / "factors.csv"
        ra.write_text("date,a,b\n2020-01-31,0.01,0.02\n2020-02-29,-0.01,0.00\n")
        fa.write_text("date,f\n2020-02-29,0.5\n2020-01-31,0.1\n")
        dates_r, returns, names = read_timeseries_csv(str(ra))
        dates_f, factors, fnames = read_timeseries_csv(str(fa))
        assert names == ["a", "b"] and fnames == ["f"]
        _, r2, f2 = join_on_dates(dates_r, returns, dates_f, factors)
        assert np.allclose(f2[:, 0], [0.1, 0.5])  # reordered onto return dates

    def test_bad_float_reports_line_number(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("date,a\n2020-01-31,0.01\n2020-02-29,oops\n")
        with pytest.raises(DataFormatError, match=":3:"):
            read_timeseries_csv(str(p))

    def test_ragged_row_reports_line_number(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("date,a,b\n2020-01-31,0.01\n")
        with pytest.raises(DataFormatError, match=":2:"):
            read_timeseries_csv(str(p))

    def test_unmatched_date_is_named(self, tmp_path):
        with pytest.raises(DataFormatError, match="2020-03-31"):
            join_on_dates(
                ["2020-01-31", "2020-03-31"], np.zeros((2, 1)),
                ["2020-01-31"], np.zeros((1, 1)),
            )
