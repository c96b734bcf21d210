"""Implicit probabilistic Adams-Moulton stepping.

The step law penalises the discrepancy between the derivative implied by
the AM formula and the field itself,

    r(z) = beta_{-1}^{-1} (h^{-1}(z - Z_i) - sum_j beta_j F_{i-j}) - f(z),
    p(z) ~ exp(-1/2 r(z)^T H^{-1} r(z)),

and is sampled either exactly with a pCN chain or approximately by
linearising f about Z_i (the semi-implicit Gaussian).
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from .errors import (
    ContractError,
    DiagnosticsError,
    MatrixError,
    StepSizeError,
)
from .linmultistep import (
    Family,
    NewtonOptions,
    am_step_deterministic,
    check_step_guard,
    march,
    parse_method,
    predictor,
    warn_missing_lipschitz,
)
from .prob_explicit import check_perturbations

logger = logging.getLogger(__name__)

CHOLESKY_JITTER = 1e-12
MAX_GAMMA_CONDITION = 1e12
MIN_ACCEPTANCE = 0.01


@dataclass(frozen=True)
class ImplicitStepLaw:
    """Stepping law for Z_{i+1} given the current window"""

    coeffs: object
    h: float
    z_current: np.ndarray
    f_window: Tuple[np.ndarray, ...]
    system: object
    scale: Optional[np.ndarray] = None
    _factor: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.coeffs.family is not Family.MOULTON:
            raise ContractError("implicit step laws need Adams-Moulton coefficients")
        if len(self.f_window) != self.coeffs.steps:
            raise ContractError(
                f"am{self.coeffs.steps} needs {self.coeffs.steps} past derivatives, got {len(self.f_window)}"
            )
        object.__setattr__(self, "z_current", np.asarray(self.z_current, dtype=float))
        if self.scale is not None:
            scale = np.atleast_2d(np.asarray(self.scale, dtype=float))
            d = self.system.dimension
            if scale.shape != (d, d):
                raise ContractError(f"H must be {d}x{d}, got {scale.shape}")
            if not np.allclose(scale, scale.T, rtol=1e-12, atol=0.0):
                raise MatrixError("H must be symmetric")
            object.__setattr__(self, "scale", scale)

    @property
    def beta(self):
        return self.coeffs.implicit_weight

    @property
    def history(self):
        """sum_j beta_j F_{i-j}"""
        acc = np.zeros(self.system.dimension)
        for b, f_val in zip(self.coeffs.explicit_weights, self.f_window):
            acc = acc + b * f_val
        return acc

    def scale_factor(self):
        if self.scale is None:
            raise ContractError("this step law was built without a scale matrix H")
        if self._factor is None:
            try:
                factor = cho_factor(self.scale, lower=True)
            except LinAlgError as exc:
                raise MatrixError("H is not positive-definite") from exc
            object.__setattr__(self, "_factor", factor)
        return self._factor

    def deterministic_point(self, options=NewtonOptions()):
        return am_step_deterministic(
            self.coeffs, (self.z_current,), self.f_window, self.h, self.system, options
        )


def residual(law, z):
    z = np.asarray(z, dtype=float)
    implied = ((z - law.z_current) / law.h - law.history) / law.beta
    return implied - law.system.f(z)


def log_density_unnormalized(law, z):
    r = residual(law, z)
    return -0.5 * float(r @ cho_solve(law.scale_factor(), r))


def isotropic_eta(scale, rtol=1e-12):
    """eta when H = eta^2 I, otherwise None"""
    diag = np.diag(scale)
    if not np.allclose(scale, np.diag(diag), rtol=0.0, atol=rtol * abs(diag[0])):
        return None
    if not np.allclose(diag, diag[0], rtol=rtol, atol=0.0) or diag[0] <= 0:
        return None
    return float(np.sqrt(diag[0]))


def normalizing_bounds(law):
    """Lower and upper bounds on the normalizing constant of the step law.

    With c = ((beta h)^{-1} - L)^2 and C = ((beta h)^{-1} + L)^2 the
    constant lies in [(2 pi eta^2 / C)^{d/2}, (2 pi eta^2 / c)^{d/2}].
    """
    lipschitz = law.system.lipschitz
    if lipschitz is None:
        raise ContractError("normalizing bounds need a Lipschitz constant")
    if not check_step_guard(law.coeffs, law.h, law.system):
        raise ContractError(
            f"h={law.h} violates h < 1/(L beta_-1) = {1.0 / (lipschitz * law.beta):g}; bounds are meaningless"
        )
    law.scale_factor()
    eta = isotropic_eta(law.scale)
    if eta is None:
        raise ContractError("normalizing bounds need an isotropic scale H = eta^2 I")
    d = law.system.dimension
    inv = 1.0 / (law.beta * law.h)
    c_lower = (inv - lipschitz) ** 2
    c_upper = (inv + lipschitz) ** 2
    return (
        (2.0 * np.pi * eta**2 / c_upper) ** (d / 2.0),
        (2.0 * np.pi * eta**2 / c_lower) ** (d / 2.0),
    )


@dataclass(frozen=True)
class SemiImplicitMoments:
    gamma: np.ndarray
    w: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray
    cholesky: np.ndarray

    @property
    def is_degenerate(self):
        return not np.any(self.cholesky)

    def log_density(self, z):
        """Unnormalized log density of N(mean, covariance)"""
        u = solve_triangular(self.cholesky, np.asarray(z, dtype=float) - self.mean, lower=True)
        return -0.5 * float(u @ u)


def _robust_cholesky(covariance, jitter):
    if not np.any(covariance):
        return np.zeros_like(covariance)
    try:
        return np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError:
        pass
    logger.debug("covariance not PD, retrying Cholesky with jitter %g", jitter)
    try:
        return np.linalg.cholesky(covariance + jitter * np.eye(covariance.shape[0]))
    except np.linalg.LinAlgError:
        logger.debug("covariance still singular, taking a deterministic step")
        return np.zeros_like(covariance)


def semi_implicit_moments(law, alpha=None):
    """Gaussian obtained by linearising f about Z_i inside r(z).

    With ``alpha`` the covariance is alpha h^(2s+1) G^-1 J J^T G^-T with J
    taken at Z_i; without it the law's own H is pushed through G^-1.
    """
    system = law.system
    d = system.dimension
    s = law.coeffs.steps
    z_i = law.z_current
    jac = system.jac(z_i)
    gamma = np.eye(d) / (law.h * law.beta) - jac
    with np.errstate(divide="ignore", invalid="ignore"):
        condition = np.linalg.cond(gamma) if np.isfinite(gamma).all() else np.inf
    if not condition <= MAX_GAMMA_CONDITION:
        raise StepSizeError(f"semi-implicit matrix is singular at h={law.h}; try a smaller step")
    w = system.f(z_i) + law.history / law.beta

    if alpha is not None:
        solved = np.linalg.solve(gamma, np.column_stack([w, jac]))
        mean = z_i + solved[:, 0]
        spread = np.sqrt(alpha * law.h ** (2 * s + 1)) * solved[:, 1:]
        covariance = spread @ spread.T
    else:
        if law.scale is None:
            raise ContractError("semi-implicit moments need either alpha or the law's H")
        mean = z_i + np.linalg.solve(gamma, w)
        left = np.linalg.solve(gamma, law.scale)
        covariance = np.linalg.solve(gamma, left.T).T
    covariance = 0.5 * (covariance + covariance.T)
    chol = _robust_cholesky(covariance, CHOLESKY_JITTER * law.h ** (2 * s + 1))
    return SemiImplicitMoments(gamma, w, mean, covariance, chol)


@dataclass(frozen=True)
class PcnOptions:
    beta: float = 0.5
    iterations: int = 60
    burn_in: int = 10
    thin: int = 1
    seed: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ContractError(f"pCN beta must lie in (0, 1], got {self.beta}")
        if not self.iterations > self.burn_in >= 0:
            raise ContractError("pCN needs iterations > burn_in >= 0")
        if self.thin < 1:
            raise ContractError("pCN thinning must be at least 1")


def pcn_chain(law, opts, reference, rng=None):
    """pCN chain targeting the step law with ``reference`` as Gaussian prior.

    Returns the retained states and the acceptance rate over all iterations.
    """
    if reference.is_degenerate:
        raise ContractError("pCN needs a positive-definite reference covariance")
    rng = np.random.default_rng(opts.seed) if rng is None else rng
    d = law.system.dimension
    mu = reference.mean
    chol = reference.cholesky
    keep_fraction = np.sqrt(1.0 - opts.beta**2)

    def log_ratio(z):
        return log_density_unnormalized(law, z) - reference.log_density(z)

    z = mu.copy()
    current = log_ratio(z)
    kept = []
    accepted = 0
    for it in range(opts.iterations):
        proposal = mu + keep_fraction * (z - mu) + opts.beta * (chol @ rng.standard_normal(d))
        candidate = log_ratio(proposal)
        if np.log(rng.random()) < candidate - current:
            z, current = proposal, candidate
            accepted += 1
        if it >= opts.burn_in and (it - opts.burn_in) % opts.thin == 0:
            kept.append(z)
    rate = accepted / opts.iterations
    if rate < MIN_ACCEPTANCE:
        raise DiagnosticsError(f"pCN acceptance rate {rate:.3%} below {MIN_ACCEPTANCE:.0%}")
    return np.array(kept), rate


def sample_step_pcn(law, opts, reference, rng=None):
    """One draw from the exact step law (last retained pCN state)"""
    kept, _ = pcn_chain(law, opts, reference, rng)
    return kept[-1]


def perturbation_second_moment(law, draws, options=NewtonOptions()):
    """Mean of |z - Psi|^2 over ``draws``, Psi the deterministic AM point"""
    centre = law.deterministic_point(options)
    diffs = np.atleast_2d(np.asarray(draws, dtype=float)) - centre
    return float(np.mean(np.sum(diffs**2, axis=1)))


def _regularized_scale(scale, jitter):
    """H itself when PD, H + jitter I when only PSD, zero when neither works"""
    if not np.any(scale):
        return scale
    try:
        np.linalg.cholesky(scale)
        return scale
    except np.linalg.LinAlgError:
        pass
    logger.debug("H is singular, adding jitter %g", jitter)
    regularized = scale + jitter * np.eye(scale.shape[0])
    try:
        np.linalg.cholesky(regularized)
        return regularized
    except np.linalg.LinAlgError:
        logger.debug("H still singular after jitter, taking a deterministic step")
        return np.zeros_like(scale)


def build_step_law(system, coeffs, h, z_window, f_window, alpha):
    """Step law whose H is the delta-method matrix at the AB predictor"""
    from .calibration import h_matrix

    z_eval = predictor(coeffs, z_window, f_window, h, system)
    scale = h_matrix(system, system.theta, z_eval, alpha, h, coeffs.steps)
    scale = _regularized_scale(scale, CHOLESKY_JITTER * h ** (2 * coeffs.steps + 1))
    return ImplicitStepLaw(coeffs, h, z_window[0], tuple(f_window), system, scale)


MODES = ("semi", "exact")


def solve_implicit_probabilistic(ivp, method, alpha, mode="semi", xi=None, pcn=PcnOptions(), rng=None):
    """Randomized AM solve.

    ``semi``: Z_{i+1} = mu_i + L_i xi_i, a deterministic function of
    (theta, xi). ``exact``: one pCN draw per step from the generator
    ``rng`` (default seeded from ``pcn.seed``).
    """
    method = parse_method(method)
    if method.family is not Family.MOULTON:
        raise ContractError(f"{method} is not an Adams-Moulton method")
    if not alpha > 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got '{mode}'")
    coeffs = method.coefficients
    system = ivp.system
    h = ivp.h
    warn_missing_lipschitz(method, system)
    tag = f"am{method.steps}-prob"

    if mode == "semi":
        if xi is None:
            raise ContractError("semi-implicit mode needs a perturbation sequence xi")
        xi = check_perturbations(xi, ivp)

        def step(i, z_window, f_window):
            law = ImplicitStepLaw(coeffs, h, z_window[0], f_window, system)
            moments = semi_implicit_moments(law, alpha)
            return moments.mean + moments.cholesky @ xi[i]

    else:
        rng = np.random.default_rng(pcn.seed) if rng is None else rng

        def step(i, z_window, f_window):
            law = build_step_law(system, coeffs, h, z_window, f_window, alpha)
            reference = semi_implicit_moments(law)
            if reference.is_degenerate:
                return reference.mean
            return sample_step_pcn(law, pcn, reference, rng)

    return march(ivp, coeffs.steps, step, tag)
