"""
Tests for synthetic data, likelihood and the Metropolis-within-Gibbs sampler
"""

from unittest.mock import patch

import numpy as np
import pytest
from scipy import integrate, stats

from core.ensemble_worker import forward_solve
from core.errors import ContractError, DivergenceError
from core.inference import (
    Chain,
    Dataset,
    GaussianPrior,
    LogNormalPrior,
    McmcOptions,
    MwgSampler,
    acceptance_probability,
    default_priors,
    effective_sample_size,
    generate_synthetic_data,
    log_likelihood,
    mwg_mcmc,
    observation_indices,
    posterior_summary,
)
from core.linmultistep import Trajectory
from core.problems import Ivp, linear_test_system, reference_solution

from conftest import FHN_X0, THETA_TRUE


def scalar_problem(lam=-0.5, t_end=4.0, h=0.1, noise_var=0.01, seed=1):
    ivp = Ivp(linear_test_system(lam), [1.0], t_end, h)
    return ivp, generate_synthetic_data(ivp, seed, noise_var=noise_var)


def make_chain(samples, accepted=None):
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    k, q = samples.shape
    accepted = np.zeros(k, dtype=bool) if accepted is None else np.asarray(accepted)
    return Chain(samples, np.zeros(k), accepted, np.zeros(k, dtype=bool), np.zeros((k, q, q)),
                 0, "am0-det", 0.1)


class TestLikelihood:
    """Test cases for the Gaussian observation model"""

    def test_zero_residual(self, rng):
        """Test -(n d / 2) log(2 pi sigma^2) when Z equals Y"""
        times = 0.1 * np.arange(201)
        states = rng.normal(size=(201, 2))
        trajectory = Trajectory(times, states, "test", np.zeros(3))
        obs_times = np.arange(1.0, 21.0)
        dataset = Dataset(obs_times, states[10::10], 0.01)
        expected = 40 * -0.5 * np.log(2 * np.pi * 0.01)
        assert log_likelihood(trajectory, dataset) == pytest.approx(expected, rel=1e-14)

    def test_matches_naive_loop(self, rng):
        times = 0.1 * np.arange(201)
        trajectory = Trajectory(times, rng.normal(size=(201, 2)), "test", np.zeros(3))
        obs_times = np.arange(1.0, 21.0)
        dataset = Dataset(obs_times, rng.normal(size=(20, 2)), [0.01, 0.04])
        naive = 0.0
        for j, t in enumerate(obs_times):
            state = trajectory.at(t)
            for k in range(2):
                naive += stats.norm.logpdf(dataset.observations[j, k], state[k], np.sqrt(dataset.noise_var[k]))
        assert log_likelihood(trajectory, dataset) == pytest.approx(naive, rel=1e-12)

    def test_off_grid_times_rejected(self):
        trajectory = Trajectory(0.3 * np.arange(11), np.zeros((11, 1)), "test", np.zeros(1))
        dataset = Dataset([1.0, 2.0], np.zeros((2, 1)), 0.01)
        with pytest.raises(ContractError):
            observation_indices(trajectory, dataset)

    def test_times_beyond_grid_rejected(self):
        trajectory = Trajectory(0.1 * np.arange(11), np.zeros((11, 1)), "test", np.zeros(1))
        with pytest.raises(ContractError):
            log_likelihood(trajectory, Dataset([2.0], np.zeros((1, 1)), 0.01))

    def test_zero_noise_rejected_for_likelihood(self):
        trajectory = Trajectory(0.1 * np.arange(11), np.zeros((11, 1)), "test", np.zeros(1))
        with pytest.raises(ContractError):
            log_likelihood(trajectory, Dataset([1.0], np.zeros((1, 1)), 0.0))

    def test_negative_noise_rejected(self):
        with pytest.raises(ContractError):
            Dataset([1.0], [[0.0]], -0.1)


class TestSyntheticData:
    """Test cases for synthetic observation generation"""

    def test_default_times(self, fhn_system):
        ivp = Ivp(fhn_system, FHN_X0, 20.0, 0.1)
        dataset = generate_synthetic_data(ivp, seed=0)
        np.testing.assert_array_equal(dataset.times, np.arange(1.0, 21.0))
        assert dataset.observations.shape == (20, 2)

    def test_zero_noise_equals_reference(self, fhn_system):
        ivp = Ivp(fhn_system, FHN_X0, 20.0, 0.1)
        dataset = generate_synthetic_data(ivp, seed=0, noise_var=0.0)
        reference = reference_solution(ivp)
        np.testing.assert_array_equal(dataset.observations, reference.states[10::10])

    def test_fixed_seed_repeatable(self):
        _, first = scalar_problem(seed=4)
        _, second = scalar_problem(seed=4)
        assert np.array_equal(first.observations, second.observations)

    def test_noise_variance(self):
        """Test the pooled noise variance of 2000 regenerations (chi-square, 1%)"""
        ivp = Ivp(linear_test_system(-0.5), [1.0], 20.0, 1.0)
        truth = reference_solution(ivp).states[1:]
        noise = np.concatenate([
            (generate_synthetic_data(ivp, seed, noise_var=0.01).observations - truth).ravel()
            for seed in range(2000)
        ])
        n = noise.size
        statistic = np.sum(noise**2) / 0.01
        assert stats.chi2.ppf(0.005, n) < statistic < stats.chi2.ppf(0.995, n)


class TestPriors:
    def test_lognormal_density(self):
        prior = LogNormalPrior(0.0, 1.0)
        x = 1.7
        expected = -np.log(x) - 0.5 * np.log(2 * np.pi) - 0.5 * np.log(x) ** 2
        assert prior.logpdf(x) == pytest.approx(expected, rel=1e-12)
        assert prior.logpdf(-1.0) == -np.inf

    def test_gaussian_density(self):
        assert GaussianPrior(1.0, 2.0).logpdf(1.0) == pytest.approx(-np.log(2.0 * np.sqrt(2 * np.pi)))

    def test_default_priors_follow_sign(self):
        priors = default_priors([0.2, -0.5, 3.0])
        assert [p.support for p in priors] == ["positive", "real", "positive"]


class TestSampler:
    """Test cases for the Metropolis-within-Gibbs sampler"""

    def test_acceptance_probability(self):
        assert acceptance_probability(-3.0, -3.0) == 1.0
        assert acceptance_probability(-1.0, -3.0) == 1.0
        assert acceptance_probability(-3.0, -1.0) == pytest.approx(np.exp(-2.0))
        assert acceptance_probability(-np.inf, -1.0) == 0.0

    def test_forward_solve_budget(self):
        """Test the sampler spends at most 2K solves, exactly one per proposal plus refreshes"""
        ivp, dataset = scalar_problem()
        opts = McmcOptions(iterations=300, burn_in=50, seed=3, initial_scale=0.05)
        chain = mwg_mcmc(dataset, ivp, "am0-prob", alpha=0.2, priors=[GaussianPrior(-1.0, 1.0)], opts=opts)
        assert chain.forward_solves <= 2 * opts.iterations
        assert chain.forward_solves == 1 + opts.iterations + int(chain.accepted[:-1].sum())
        assert chain.xi_refreshes == int(chain.accepted.sum())
        assert 0 < chain.acceptance_rate < 1

    def test_deterministic_method_never_refreshes(self):
        ivp, dataset = scalar_problem()
        opts = McmcOptions(iterations=200, burn_in=20, seed=3, initial_scale=0.05)
        chain = mwg_mcmc(dataset, ivp, "am0-det", priors=[GaussianPrior(-1.0, 1.0)], opts=opts)
        assert chain.xi_refreshes == 0
        assert chain.forward_solves == 1 + opts.iterations

    def test_rejections_repeat_previous_sample(self):
        ivp, dataset = scalar_problem()
        opts = McmcOptions(iterations=300, burn_in=50, seed=5, initial_scale=0.2)
        chain = mwg_mcmc(dataset, ivp, "ab1-prob", alpha=0.2, priors=[GaussianPrior(-1.0, 1.0)], opts=opts)
        for k in range(1, chain.iterations):
            if not chain.accepted[k]:
                np.testing.assert_array_equal(chain.samples[k], chain.samples[k - 1])
        assert chain.accepted[0] or np.array_equal(chain.samples[0], chain.theta0)

    def test_fixed_seed_repeatable(self):
        ivp, dataset = scalar_problem()
        opts = McmcOptions(iterations=150, burn_in=10, seed=8, initial_scale=0.05)
        first = mwg_mcmc(dataset, ivp, "am1-prob", alpha=0.2, priors=[GaussianPrior(-1.0, 1.0)], opts=opts)
        second = mwg_mcmc(dataset, ivp, "am1-prob", alpha=0.2, priors=[GaussianPrior(-1.0, 1.0)], opts=opts)
        assert np.array_equal(first.samples, second.samples)
        assert np.array_equal(first.log_posterior, second.log_posterior)

    def test_likelihood_deterministic_given_xi(self, rng):
        ivp, dataset = scalar_problem()
        sampler = MwgSampler(dataset, ivp, "am0-prob", 0.2, [GaussianPrior(-1.0, 1.0)], McmcOptions())
        xi = rng.standard_normal((ivp.n_steps, 1))
        assert sampler.log_likelihood([-0.4], xi) == sampler.log_likelihood([-0.4], xi.copy())
        assert sampler.forward_solves == 2

    def test_divergent_proposals_rejected(self):
        """Test proposals whose solve diverges are flagged and never accepted"""
        ivp, dataset = scalar_problem()

        def fragile(ivp_, method, alpha=None, xi=None, **kwargs):
            if ivp_.system.theta[0] > -0.45:
                raise DivergenceError("synthetic blow-up", step=7)
            return forward_solve(ivp_, method, alpha, xi=xi, **kwargs)

        opts = McmcOptions(iterations=200, burn_in=20, seed=2, initial_scale=0.1)
        with patch("core.inference.forward_solve", side_effect=fragile):
            chain = mwg_mcmc(dataset, ivp, "am0-det", priors=[GaussianPrior(-1.0, 1.0)], opts=opts)
        assert chain.diverged.any()
        assert not np.any(chain.accepted & chain.diverged)
        assert np.all(chain.samples[:, 0] <= -0.45)

    def test_log_space_proposals_stay_positive(self):
        """Test lognormal priors keep FitzHugh-Nagumo parameters positive"""
        from core.problems import fitzhugh_nagumo

        ivp = Ivp(fitzhugh_nagumo(THETA_TRUE), FHN_X0, 4.0, 0.1)
        dataset = generate_synthetic_data(ivp, seed=0)
        opts = McmcOptions(iterations=60, burn_in=10, seed=1, initial_scale=0.05)
        chain = mwg_mcmc(dataset, ivp, "ab1-det", opts=opts)
        assert np.all(chain.samples > 0)
        np.testing.assert_array_equal(chain.theta0, THETA_TRUE)

    def test_exact_mode_rejected(self):
        ivp, dataset = scalar_problem()
        with pytest.raises(ContractError):
            mwg_mcmc(dataset, ivp, "am0-prob", alpha=0.2, opts=McmcOptions(mode="exact"))

    def test_prior_count_checked(self):
        ivp, dataset = scalar_problem()
        with pytest.raises(ContractError):
            MwgSampler(dataset, ivp, "am0-det", None, [GaussianPrior(), GaussianPrior()], McmcOptions())

    @pytest.mark.parametrize("kwargs", [
        {"iterations": 0}, {"burn_in": 11000}, {"burn_in": -1}, {"initial_scale": 0.0},
    ])
    def test_options_validated(self, kwargs):
        with pytest.raises(ContractError):
            McmcOptions(**kwargs)

    def test_posterior_mean_matches_quadrature(self):
        """Test the chain mean against a quadrature posterior within 3 Monte Carlo standard errors"""
        ivp, dataset = scalar_problem()
        prior = GaussianPrior(-1.0, 1.0)
        opts = McmcOptions(iterations=4000, burn_in=500, seed=2, initial_scale=0.05)
        chain = mwg_mcmc(dataset, ivp, "am1-det", priors=[prior], opts=opts)

        def log_post(lam):
            trajectory = forward_solve(ivp.with_system(ivp.system.with_theta([lam])), "am1-det")
            return log_likelihood(trajectory, dataset) + prior.logpdf(lam)

        grid = np.linspace(-1.0, 0.0, 401)
        values = np.array([log_post(lam) for lam in grid])
        weights = np.exp(values - values.max())
        mass = integrate.trapezoid(weights, grid)
        exact_mean = integrate.trapezoid(grid * weights, grid) / mass
        exact_sd = np.sqrt(integrate.trapezoid((grid - exact_mean) ** 2 * weights, grid) / mass)

        kept = chain.samples[opts.burn_in:, 0]
        se = exact_sd / np.sqrt(effective_sample_size(kept))
        assert abs(kept.mean() - exact_mean) < 3 * se

    def test_posterior_widening_slow(self, fhn_system):
        """Test probabilistic posteriors are wider than deterministic ones at h = 0.05"""
        ivp = Ivp(fhn_system, FHN_X0, 20.0, 0.05)
        dataset = generate_synthetic_data(ivp, seed=0)
        opts = McmcOptions(seed=1)
        spread = {}
        for tag, alpha in (("ab1-det", None), ("ab1-prob", 0.2), ("am0-det", None), ("am0-prob", 0.2)):
            chain = mwg_mcmc(dataset, ivp, tag, alpha=alpha, opts=opts)
            summary = posterior_summary(chain, opts.burn_in, 10)
            assert summary.samples.shape[0] == 1000
            spread[tag] = summary.table.loc["theta3", "std"]
        assert spread["ab1-prob"] > spread["ab1-det"]
        assert spread["am0-prob"] > spread["am0-det"]

    def test_posterior_contraction_slow(self, fhn_system):
        """Test that h = 0.005 pulls all four posterior means toward the truth, theta3 within 0.15"""
        dataset = generate_synthetic_data(Ivp(fhn_system, FHN_X0, 20.0, 0.005), seed=0)
        opts = McmcOptions(seed=1)
        truth = np.asarray(THETA_TRUE)
        for tag, alpha in (("ab1-det", None), ("ab1-prob", 0.2), ("am0-det", None), ("am0-prob", 0.2)):
            distance = {}
            for h in (0.05, 0.005):
                chain = mwg_mcmc(dataset, Ivp(fhn_system, FHN_X0, 20.0, h), tag, alpha=alpha, opts=opts)
                summary = posterior_summary(chain, opts.burn_in, 10)
                means = summary.table["mean"].to_numpy()
                distance[h] = np.linalg.norm(means - truth)
                if h == 0.005:
                    assert abs(summary.table.loc["theta3", "mean"] - 3.0) < 0.15
            assert distance[0.005] <= distance[0.05] + 0.05


class TestEffectiveSampleSize:
    def test_constant_chain(self):
        assert effective_sample_size(np.full(100, 3.0)) == 1.0

    def test_independent_draws(self, rng):
        ess = effective_sample_size(rng.normal(size=5000))
        assert 4000 < ess <= 5000

    def test_autocorrelated_chain(self, rng):
        """Test AR(1) with rho = 0.9 gives ESS near n (1 - rho) / (1 + rho)"""
        n, rho = 20_000, 0.9
        x = np.empty(n)
        x[0] = rng.normal()
        for k in range(1, n):
            x[k] = rho * x[k - 1] + np.sqrt(1 - rho**2) * rng.normal()
        expected = n * (1 - rho) / (1 + rho)
        assert 0.6 * expected < effective_sample_size(x) < 1.5 * expected


class TestPosteriorSummary:
    """Test cases for burn-in, thinning and summary statistics"""

    def test_retained_count(self, rng):
        """Test 11000 iterations, burn-in 1000, thin 10 keeps 1000 samples"""
        summary = posterior_summary(make_chain(rng.normal(size=(11000, 3))), 1000, 10)
        assert summary.samples.shape == (1000, 3)
        assert list(summary.table.index) == ["theta1", "theta2", "theta3"]
        assert summary.cloud().shape == (1000, 2)

    def test_mean_matches_loop(self, rng):
        samples = rng.normal(size=(500, 2))
        summary = posterior_summary(make_chain(samples), 100, 3)
        kept = samples[100::3]
        for j in range(2):
            total = 0.0
            for value in kept[:, j]:
                total += value
            assert summary.table["mean"].iloc[j] == pytest.approx(total / len(kept), rel=1e-12)

    def test_identical_samples(self):
        summary = posterior_summary(make_chain(np.full(50, 0.5)), 10)
        row = summary.table.loc["theta1"]
        assert row["std"] == 0.0
        assert row["ess"] == 1.0
        assert row["q2.5"] == row["q97.5"] == 0.5

    @pytest.mark.parametrize("burn_in, thin", [(50, 1), (-1, 1), (10, 0)])
    def test_invalid_burn_in(self, burn_in, thin):
        with pytest.raises(ContractError):
            posterior_summary(make_chain(np.zeros(50)), burn_in, thin)
