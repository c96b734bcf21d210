"""Randomized Adams-Bashforth integrators.

A deterministic AB step followed by an additive Gaussian perturbation of
variance alpha h^(2s+1). Perturbations are supplied by the caller so that a
solve is a deterministic function of (ivp, theta, xi).
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .linmultistep import Family, ab_step, march, parse_method

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExplicitNoiseSpec:
    alpha: float
    steps: int

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")
        if self.steps < 1:
            raise ContractError(f"explicit methods need at least one step, got {self.steps}")

    @property
    def exponent(self):
        return 2 * self.steps + 1

    def scale(self, h):
        return np.sqrt(self.alpha * h**self.exponent)


def ab_step_randomized(coeffs, z_window, f_window, h, spec, xi_i):
    return ab_step(coeffs, z_window, f_window, h) + spec.scale(h) * np.asarray(xi_i, dtype=float)


def check_perturbations(xi, ivp):
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 1 and ivp.system.dimension == 1:
        xi = xi[:, None]
    if xi.ndim != 2 or xi.shape[0] < ivp.n_steps or xi.shape[1] != ivp.system.dimension:
        raise ContractError(
            f"perturbation sequence of shape {xi.shape} does not cover "
            f"{ivp.n_steps} steps in dimension {ivp.system.dimension}"
        )
    return xi


def solve_explicit_randomized(ivp, method, spec, xi):
    """Randomized AB solve consuming row ``xi[i]`` at step i.

    RK4 startup steps are unperturbed; their rows are skipped.
    """
    method = parse_method(method)
    if method.family is not Family.BASHFORTH:
        raise ContractError(f"{method} is not an Adams-Bashforth method")
    if spec.steps != method.steps:
        raise ContractError(f"noise spec is for {spec.steps} steps, method has {method.steps}")
    xi = check_perturbations(xi, ivp)
    coeffs = method.coefficients
    tag = f"ab{method.steps}-prob"

    def step(i, z_window, f_window):
        return ab_step_randomized(coeffs, z_window, f_window, ivp.h, spec, xi[i])

    return march(ivp, coeffs.steps, step, tag)
