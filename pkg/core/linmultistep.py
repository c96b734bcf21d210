"""Deterministic Adams-Bashforth / Adams-Moulton integrators.

Coefficients are generated exactly from integrals of Lagrange basis
polynomials and converted to floats once. Windows of past states and
derivatives are always passed newest first.
"""

import enum
import logging
import re
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Tuple

import numpy as np

from .errors import ContractError, DivergenceError, InvalidParameterError, NumericalError, SolverError
from .problems import rk4_step

logger = logging.getLogger(__name__)

MAX_STEPS = 4


class Family(enum.Enum):
    BASHFORTH = "ab"
    MOULTON = "am"


@dataclass(frozen=True)
class AdamsCoefficients:
    """Exact coefficients of an s-step Adams method.

    For Moulton, ``exact[0]`` is the implicit weight beta_{-1} and the rest
    are beta_0..beta_{s-1}; for Bashforth ``exact`` is beta_0..beta_{s-1}.
    """

    family: Family
    steps: int
    exact: Tuple[Fraction, ...]

    def __post_init__(self):
        if sum(self.exact) != 1:
            raise ContractError(f"Adams coefficients must sum to 1, got {sum(self.exact)}")
        if self.family is Family.MOULTON and self.exact[0] <= 0:
            raise ContractError("implicit weight beta_{-1} must be positive")
        object.__setattr__(self, "_floats", np.array([float(c) for c in self.exact]))

    @property
    def implicit_weight(self):
        if self.family is not Family.MOULTON:
            raise ContractError("Bashforth methods have no implicit weight")
        return self._floats[0]

    @property
    def explicit_weights(self):
        """beta_0..beta_{s-1} as floats"""
        if self.family is Family.MOULTON:
            return self._floats[1:]
        return self._floats


def _poly_mul_linear(poly, root):
    """Multiply a coefficient list (lowest degree first) by (u - root)"""
    out = [Fraction(0)] * (len(poly) + 1)
    for k, c in enumerate(poly):
        out[k + 1] += c
        out[k] -= root * c
    return out


def _lagrange_integrals(nodes):
    """Integrals over [0, 1] of the Lagrange basis polynomials on ``nodes``"""
    weights = []
    for j, node in enumerate(nodes):
        poly = [Fraction(1)]
        denom = Fraction(1)
        for m, other in enumerate(nodes):
            if m == j:
                continue
            poly = _poly_mul_linear(poly, other)
            denom *= node - other
        integral = sum(c / (k + 1) for k, c in enumerate(poly))
        weights.append(integral / denom)
    return tuple(weights)


@lru_cache(maxsize=None)
def adams_coefficients(family, steps):
    """Coefficients of the ``steps``-step Adams method of ``family``"""
    family = Family(family)
    if family is Family.MOULTON:
        if not 0 <= steps <= MAX_STEPS:
            raise InvalidParameterError(f"Adams-Moulton supports 0..{MAX_STEPS} steps, got {steps}")
        nodes = [Fraction(1)] + [Fraction(-j) for j in range(steps)]
    else:
        if not 1 <= steps <= MAX_STEPS:
            raise InvalidParameterError(f"Adams-Bashforth supports 1..{MAX_STEPS} steps, got {steps}")
        nodes = [Fraction(-j) for j in range(steps)]
    return AdamsCoefficients(family, steps, _lagrange_integrals(nodes))


@dataclass(frozen=True)
class MethodSpec:
    family: Family
    steps: int
    probabilistic: bool

    @property
    def tag(self):
        return f"{self.family.value}{self.steps}-{'prob' if self.probabilistic else 'det'}"

    @property
    def coefficients(self):
        return adams_coefficients(self.family, self.steps)

    @property
    def order(self):
        return self.steps + 1 if self.family is Family.MOULTON else self.steps

    def deterministic_counterpart(self):
        return MethodSpec(self.family, self.steps, False)

    def __str__(self):
        return self.tag


_METHOD_RE = re.compile(r"^(ab|am)(\d)-(det|prob)$")


def parse_method(tag):
    if isinstance(tag, MethodSpec):
        return tag
    match = _METHOD_RE.match(str(tag).strip().lower())
    if not match:
        raise InvalidParameterError(f"unrecognised method '{tag}' (expected e.g. 'am0-prob', 'ab2-det')")
    family, steps, kind = match.groups()
    spec = MethodSpec(Family(family), int(steps), kind == "prob")
    adams_coefficients(spec.family, spec.steps)
    return spec


@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-12
    max_iter: int = 50

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1:
            raise ContractError(f"invalid Newton options {self}")


@dataclass(frozen=True)
class Trajectory:
    """States Z_0..Z_N on a uniform grid"""

    times: np.ndarray
    states: np.ndarray
    method: str
    theta: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.shape[0] != len(self.times):
            raise ContractError("trajectory needs one state per grid time")
        if np.any(np.diff(self.times) <= 0):
            raise ContractError("trajectory grid must be strictly increasing")
        bad = ~np.all(np.isfinite(states), axis=1)
        if bad.any():
            raise DivergenceError("trajectory holds non-finite states", step=int(np.argmax(bad)))
        object.__setattr__(self, "states", states)

    @property
    def terminal(self):
        return self.states[-1]

    @property
    def h(self):
        return float(self.times[1] - self.times[0])

    def at(self, t):
        return self.states[int(round(t / self.h))]


def _check_window(coeffs, f_window):
    if len(f_window) != coeffs.steps:
        raise ContractError(
            f"{coeffs.family.value}{coeffs.steps} needs a derivative window of {coeffs.steps}, got {len(f_window)}"
        )


def _weighted_sum(weights, f_window, like):
    acc = np.zeros_like(like, dtype=float)
    for beta, f_val in zip(weights, f_window):
        acc = acc + beta * f_val
    return acc


def ab_step(coeffs, z_window, f_window, h, system=None):
    """Z_{i+1} = Z_i + h sum_j beta_j F_{i-j}; never evaluates f"""
    _check_window(coeffs, f_window)
    z_i = np.asarray(z_window[0], dtype=float)
    return z_i + h * _weighted_sum(coeffs.explicit_weights, f_window, z_i)


def predictor(coeffs, z_window, f_window, h, system):
    """AB step with as many steps as the AM window, forward Euler for AM0"""
    z_i = np.asarray(z_window[0], dtype=float)
    if coeffs.steps == 0:
        return z_i + h * system.f(z_i)
    return ab_step(adams_coefficients(Family.BASHFORTH, coeffs.steps), z_window, f_window, h)


def check_step_guard(coeffs, h, system):
    """True when h < 1/(L beta_{-1}); None when no Lipschitz hint exists"""
    if system.lipschitz is None:
        return None
    return bool(h * coeffs.implicit_weight * system.lipschitz < 1.0)


def am_step_deterministic(coeffs, z_window, f_window, h, system, options=NewtonOptions()):
    """Fixed point of z = Z_i + h (beta_{-1} f(z) + sum_j beta_j F_{i-j})"""
    _check_window(coeffs, f_window)
    if check_step_guard(coeffs, h, system) is False:
        logger.warning(
            "h=%g violates h < 1/(L beta_-1) for L=%g; Newton may not converge", h, system.lipschitz
        )
    z_i = np.asarray(z_window[0], dtype=float)
    beta = coeffs.implicit_weight
    known = z_i + h * _weighted_sum(coeffs.explicit_weights, f_window, z_i)
    eye = np.eye(system.dimension)

    z = predictor(coeffs, z_window, f_window, h, system)
    residual = z - known - h * beta * system.f(z)
    norm = np.linalg.norm(residual)
    for _ in range(options.max_iter):
        if norm < options.tol:
            return z
        delta = np.linalg.solve(eye - h * beta * system.jac(z), residual)
        z = z - delta
        residual = z - known - h * beta * system.f(z)
        norm = np.linalg.norm(residual)
        if not np.isfinite(norm):
            break
        # stalled at roundoff
        if np.linalg.norm(delta) <= 4 * np.finfo(float).eps * max(1.0, np.linalg.norm(z)):
            if norm < 1e3 * options.tol:
                logger.debug("Newton stalled at residual %.3g (tol %.3g); accepting", norm, options.tol)
                return z
    if norm < options.tol:
        return z
    raise SolverError(f"Newton did not converge in {options.max_iter} iterations", residual=float(norm))


def march(ivp, steps, step_fn, tag):
    """Drive ``step_fn(i, z_window, f_window)`` over the grid of ``ivp``.

    The first ``steps - 1`` states are seeded with RK4 at the same h. Any
    NumericalError raised inside a step gets the step index attached.
    """
    system = ivp.system
    n = ivp.n_steps
    h = ivp.h
    states = np.empty((n + 1, system.dimension))
    states[0] = ivp.x0
    z_window = deque([ivp.x0.copy()], maxlen=max(steps, 1))
    f_window = deque(maxlen=max(steps, 1))
    if steps > 0:
        f_window.appendleft(system.f(ivp.x0))

    for i in range(n):
        try:
            if i < steps - 1:
                z_next = rk4_step(system, z_window[0], h)
            else:
                z_next = step_fn(i, z_window, tuple(f_window) if steps > 0 else ())
        except NumericalError as exc:
            if exc.step is None:
                exc.step = i
            raise
        if not np.all(np.isfinite(z_next)):
            raise DivergenceError(f"{tag} produced a non-finite state", step=i + 1)
        states[i + 1] = z_next
        z_window.appendleft(z_next)
        if steps > 0:
            f_window.appendleft(system.f(z_next))
    return Trajectory(ivp.times, states, tag, system.theta)


@lru_cache(maxsize=None)
def _warn_no_lipschitz(name):
    logger.warning("no Lipschitz hint for '%s'; skipping the h < 1/(L beta_-1) guard", name)


def warn_missing_lipschitz(method, system):
    """Warns once per system name"""
    if method.family is Family.MOULTON and system.lipschitz is None:
        _warn_no_lipschitz(system.name)


def solve_deterministic(ivp, method, options=NewtonOptions()):
    """Full-grid solve with the deterministic AB or AM method"""
    method = parse_method(method).deterministic_counterpart()
    coeffs = method.coefficients
    system = ivp.system
    if method.family is Family.BASHFORTH:

        def step(i, z_window, f_window):
            return ab_step(coeffs, z_window, f_window, ivp.h)

    else:
        warn_missing_lipschitz(method, system)

        def step(i, z_window, f_window):
            return am_step_deterministic(coeffs, z_window, f_window, ivp.h, system, options)

    return march(ivp, coeffs.steps, step, method.tag)
