"""Bayesian parameter inference with randomized forward solves.

The sampler is Metropolis-within-Gibbs over (theta, xi): a proposal is
scored with the perturbation sequence of the current state, and xi is
redrawn only when a proposal is accepted. Proposals are adaptive
Metropolis moves in log space for positive parameters.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .ensemble_worker import draw_perturbations, forward_solve
from .errors import ContractError, InvalidParameterError, NumericalError
from .linmultistep import Family, parse_method
from .problems import reference_solution

logger = logging.getLogger(__name__)

GRID_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Dataset:
    """Observations Y_j = x(t_j) + eps_j with eps_j ~ N(0, diag(noise_var))"""

    times: np.ndarray
    observations: np.ndarray
    noise_var: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.shape[0] != times.size:
            raise ContractError(f"{times.size} observation times but {obs.shape[0]} observations")
        var = np.broadcast_to(np.asarray(self.noise_var, dtype=float), (obs.shape[1],)).copy()
        if np.any(var < 0):
            raise ContractError("noise variance must be non-negative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "noise_var", var)

    @property
    def n_obs(self):
        return self.times.size


def observation_indices(trajectory, dataset):
    """Grid indices of the observation times; they must sit on the grid"""
    h = trajectory.h
    idx = np.rint(dataset.times / h).astype(int)
    off_grid = np.abs(idx * h - dataset.times) > GRID_TOLERANCE
    out_of_range = (idx < 0) | (idx >= len(trajectory.times))
    if off_grid.any() or out_of_range.any():
        bad = dataset.times[off_grid | out_of_range]
        raise ContractError(f"observation times {bad.tolist()} are not on the solver grid (h={h})")
    return idx


def log_likelihood(trajectory, dataset):
    """sum_j log N(Y_j | Z(t_j), diag(noise_var))"""
    if np.any(dataset.noise_var <= 0):
        raise ContractError("likelihood needs a strictly positive noise variance")
    idx = observation_indices(trajectory, dataset)
    resid = dataset.observations - trajectory.states[idx]
    var = dataset.noise_var
    return float(-0.5 * np.sum(resid**2 / var + np.log(2.0 * np.pi * var)))


def generate_synthetic_data(ivp_true, seed, times=None, noise_var=0.01, refine=100):
    """Reference-solution values at ``times`` (default 1, 2, ..., T) plus noise"""
    if times is None:
        times = np.arange(1, int(np.floor(ivp_true.t_end)) + 1, dtype=float)
    reference = reference_solution(ivp_true, refine)
    clean = Dataset(times, np.zeros((len(times), ivp_true.system.dimension)), noise_var)
    truth = reference.states[observation_indices(reference, clean)]
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(truth.shape) * np.sqrt(clean.noise_var)
    return Dataset(clean.times, truth + noise, clean.noise_var)


@dataclass(frozen=True)
class LogNormalPrior:
    mu: float = 0.0
    sigma: float = 1.0
    support = "positive"

    def logpdf(self, value):
        return float(stats.lognorm.logpdf(value, s=self.sigma, scale=np.exp(self.mu)))


@dataclass(frozen=True)
class GaussianPrior:
    mean: float = 0.0
    std: float = 1.0
    support = "real"

    def logpdf(self, value):
        return float(stats.norm.logpdf(value, loc=self.mean, scale=self.std))


def default_priors(theta0):
    """LogNormal(0, 1) for positive starting components, N(0, 1) otherwise"""
    return [LogNormalPrior(0.0, 1.0) if v > 0 else GaussianPrior(0.0, 1.0) for v in np.ravel(theta0)]


@dataclass(frozen=True)
class McmcOptions:
    iterations: int = 11000
    burn_in: int = 1000
    seed: int = 0
    theta0: Optional[Sequence[float]] = None
    initial_scale: float = 0.1
    adapt_start: int = 200
    epsilon: float = 1e-8
    mode: str = "semi"

    def __post_init__(self):
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations:
            raise ContractError("MCMC needs iterations >= 1 and 0 <= burn_in < iterations")
        if self.initial_scale <= 0 or self.epsilon <= 0:
            raise ContractError("proposal scale and regulariser must be positive")


@dataclass
class Chain:
    samples: np.ndarray
    log_posterior: np.ndarray
    accepted: np.ndarray
    diverged: np.ndarray
    proposal_cov: np.ndarray
    seed: int
    method: str
    h: float
    xi_refreshes: int = 0
    forward_solves: int = 0
    theta0: np.ndarray = field(default=None)

    def __post_init__(self):
        k = len(self.samples)
        if not (len(self.log_posterior) == len(self.accepted) == len(self.diverged) == k):
            raise ContractError("chain records must have equal lengths")

    @property
    def iterations(self):
        return len(self.samples)

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accepted))


def acceptance_probability(log_target_star, log_target_current):
    """min(1, phi*/phi) from log values"""
    if not np.isfinite(log_target_star):
        return 0.0
    diff = log_target_star - log_target_current
    return 1.0 if diff >= 0 else float(np.exp(diff))


class _AdaptiveProposal:
    """Haario-style adaptive Metropolis covariance on the unconstrained scale"""

    def __init__(self, dim, initial_scale, adapt_start, freeze_after, epsilon):
        self.dim = dim
        self.scale = 2.38**2 / dim
        self.cov = np.eye(dim) * initial_scale**2
        self.adapt_start = adapt_start
        self.freeze_after = freeze_after
        self.epsilon = epsilon
        self._n = 0
        self._mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))

    def update(self, u, k):
        if k >= self.freeze_after:
            return
        self._n += 1
        delta = u - self._mean
        self._mean = self._mean + delta / self._n
        self._m2 = self._m2 + np.outer(delta, u - self._mean)
        if self._n > self.adapt_start:
            empirical = self._m2 / (self._n - 1)
            self.cov = self.scale * (empirical + self.epsilon * np.eye(self.dim))

    def propose(self, u, rng):
        chol = np.linalg.cholesky(self.cov)
        return u + chol @ rng.standard_normal(self.dim)


class MwgSampler:
    """Metropolis-within-Gibbs over (theta, xi) with a counted forward model"""

    def __init__(self, dataset, ivp_template, method, alpha, priors, opts):
        self.dataset = dataset
        self.ivp = ivp_template
        self.method = parse_method(method)
        self.alpha = alpha
        self.opts = opts
        q = ivp_template.system.theta.size
        theta0 = opts.theta0 if opts.theta0 is not None else ivp_template.system.theta
        self.priors = list(priors) if priors is not None else default_priors(theta0)
        if len(self.priors) != q:
            raise ContractError(f"{q} parameters but {len(self.priors)} priors")
        if self.method.probabilistic and self.method.family is Family.MOULTON and opts.mode != "semi":
            raise ContractError("only semi-implicit mode gives a fixed-xi likelihood")
        self.log_space = np.array([p.support == "positive" for p in self.priors])
        self.forward_solves = 0

    def to_unconstrained(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.where(self.log_space, np.log(np.where(self.log_space, theta, 1.0)), theta)

    def to_theta(self, u):
        return np.where(self.log_space, np.exp(u), u)

    def log_prior(self, theta):
        if np.any(self.log_space & (theta <= 0)):
            return -np.inf
        return float(sum(p.logpdf(v) for p, v in zip(self.priors, theta)))

    def log_likelihood(self, theta, xi):
        """Forward solve at theta under xi; raises on divergence"""
        system = self.ivp.system.with_theta(theta)
        self.forward_solves += 1
        trajectory = forward_solve(self.ivp.with_system(system), self.method, self.alpha, xi=xi)
        return log_likelihood(trajectory, self.dataset)

    def evaluate(self, theta, u, xi):
        """(log target on the unconstrained scale, log posterior)"""
        prior = self.log_prior(theta)
        if not np.isfinite(prior):
            return -np.inf, -np.inf
        post = self.log_likelihood(theta, xi) + prior
        jacobian = float(np.sum(u[self.log_space]))
        return post + jacobian, post

    def run(self, progress_updated=None):
        opts = self.opts
        rng = np.random.default_rng(opts.seed)
        probabilistic = self.method.probabilistic
        theta = np.asarray(opts.theta0 if opts.theta0 is not None else self.ivp.system.theta, dtype=float)
        u = self.to_unconstrained(theta)
        q = theta.size
        K = opts.iterations

        samples = np.empty((K, q))
        log_post = np.empty(K)
        accepted = np.zeros(K, dtype=bool)
        diverged = np.zeros(K, dtype=bool)
        cov_history = np.empty((K, q, q))
        proposal = _AdaptiveProposal(q, opts.initial_scale, opts.adapt_start, opts.burn_in, opts.epsilon)

        xi = draw_perturbations(self.ivp, rng) if probabilistic else None
        refreshes = 0
        target, post = self.evaluate(theta, u, xi)
        if not np.isfinite(target):
            raise NumericalError(f"initial parameters {theta.tolist()} have zero posterior density")
        stale = False

        for k in range(K):
            if stale:
                try:
                    target, post = self.evaluate(theta, u, xi)
                except (NumericalError, InvalidParameterError) as exc:
                    logger.warning("iteration %d: refreshed likelihood failed (%s)", k, exc)
                    target, post = -np.inf, -np.inf
                stale = False

            cov_history[k] = proposal.cov
            u_star = proposal.propose(u, rng)
            theta_star = self.to_theta(u_star)
            try:
                target_star, post_star = self.evaluate(theta_star, u_star, xi)
            except (NumericalError, InvalidParameterError) as exc:
                logger.warning("iteration %d: forward solve failed at %s (%s); rejecting", k, theta_star, exc)
                diverged[k] = True
                target_star, post_star = -np.inf, -np.inf

            if rng.random() < acceptance_probability(target_star, target):
                theta, u, target, post = theta_star, u_star, target_star, post_star
                accepted[k] = True
                if probabilistic:
                    xi = draw_perturbations(self.ivp, rng)
                    refreshes += 1
                    stale = k < K - 1

            samples[k] = theta
            log_post[k] = post
            proposal.update(u, k)
            if progress_updated is not None and (k + 1) % max(1, K // 100) == 0:
                progress_updated(int(100 * (k + 1) / K), f"Iteration {k + 1}/{K}",
                                 f"acceptance {accepted[:k + 1].mean():.2f}")

        logger.info(
            "%s chain at h=%g: acceptance %.3f, %d forward solves, %d divergent proposals",
            self.method, self.ivp.h, accepted.mean(), self.forward_solves, diverged.sum(),
        )
        return Chain(samples, log_post, accepted, diverged, cov_history, opts.seed, self.method.tag,
                     self.ivp.h, refreshes, self.forward_solves, np.asarray(opts.theta0
                     if opts.theta0 is not None else self.ivp.system.theta, dtype=float))


def mwg_mcmc(dataset, ivp_template, method, alpha=None, priors=None, opts=McmcOptions(), progress_updated=None):
    return MwgSampler(dataset, ivp_template, method, alpha, priors, opts).run(progress_updated)


def effective_sample_size(x):
    """ESS via FFT autocorrelation truncated at the first non-positive
    pair sum (initial positive sequence)"""
    x = np.asarray(x, dtype=float)
    n = x.size
    centred = x - x.mean()
    var = float(np.dot(centred, centred)) / n
    if n < 2 or var == 0:
        return 1.0
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centred, size)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), size)[:n] / n
    rho = acov / acov[0]
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(np.clip(n / max(tau, 1e-12), 1.0, n))


@dataclass(frozen=True)
class PosteriorSummary:
    table: pd.DataFrame
    samples: np.ndarray

    def cloud(self, columns=(1, 2)):
        """Retained samples of two components, (theta2, theta3) by default"""
        return self.samples[:, list(columns)]


def posterior_summary(chain, burn_in, thin=1):
    if not 0 <= burn_in < chain.iterations or thin < 1:
        raise ContractError(f"burn_in={burn_in}, thin={thin} invalid for {chain.iterations} samples")
    kept = chain.samples[burn_in::thin]
    if kept.shape[0] == 0:
        raise ContractError("no samples left after burn-in")
    rows = []
    for j in range(kept.shape[1]):
        col = kept[:, j]
        rows.append({
            "parameter": f"theta{j + 1}",
            "mean": float(np.mean(col)),
            "std": float(np.std(col, ddof=1)) if col.size > 1 else 0.0,
            "q2.5": float(np.quantile(col, 0.025)),
            "q50": float(np.quantile(col, 0.5)),
            "q97.5": float(np.quantile(col, 0.975)),
            "ess": effective_sample_size(col),
        })
    return PosteriorSummary(pd.DataFrame(rows).set_index("parameter"), kept)
