"""ODE problem abstraction and the concrete test systems.

Every system is autonomous, ``z' = f(z, theta)``, and carries an analytic
Jacobian. Linear systems additionally carry their exact flow so that error
measurements on them never depend on a numerical reference.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, ContractError, DivergenceError, InvalidParameterError

logger = logging.getLogger(__name__)

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]
Flow = Callable[[np.ndarray, float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class OdeSystem:
    """Vector field, Jacobian and parameters of an autonomous ODE"""

    name: str
    dimension: int
    theta: np.ndarray
    vector_field: Field = field(repr=False)
    jacobian: Field = field(repr=False)
    lipschitz_of: Optional[Callable[[np.ndarray], float]] = field(default=None, repr=False)
    exact_flow: Optional[Flow] = field(default=None, repr=False)
    validate_theta: Optional[Callable[[np.ndarray], None]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.dimension < 1:
            raise ContractError(f"dimension must be positive, got {self.dimension}")
        theta = np.array(self.theta, dtype=float).ravel()
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if self.validate_theta is not None:
            self.validate_theta(theta)

    @property
    def lipschitz(self):
        """Lipschitz hint at the current theta, None when unknown"""
        if self.lipschitz_of is None:
            return None
        return float(self.lipschitz_of(self.theta))

    def f(self, z):
        return np.asarray(self.vector_field(z, self.theta), dtype=float)

    def jac(self, z):
        return np.asarray(self.jacobian(z, self.theta), dtype=float).reshape(
            self.dimension, self.dimension
        )

    def with_theta(self, theta):
        """Same system at new parameter values (re-validated)"""
        return replace(self, theta=np.asarray(theta, dtype=float))

    def flow(self, x0, t):
        if self.exact_flow is None:
            raise ContractError(f"system '{self.name}' has no exact flow")
        return np.asarray(self.exact_flow(np.asarray(x0, dtype=float), t, self.theta), dtype=float)


@dataclass(frozen=True)
class Ivp:
    """Initial value problem on the uniform grid t_i = i*h, 0 <= t_i <= T"""

    system: OdeSystem
    x0: np.ndarray
    t_end: float
    h: float

    def __post_init__(self):
        x0 = np.array(self.x0, dtype=float).ravel()
        if x0.shape != (self.system.dimension,):
            raise ContractError(
                f"initial state has {x0.size} components, system needs {self.system.dimension}"
            )
        if not self.h > 0:
            raise ContractError(f"step size must be positive, got {self.h}")
        n = round(self.t_end / self.h)
        if n < 1:
            raise ContractError(f"interval [0, {self.t_end}] holds no step of size {self.h}")
        if not math.isclose(n * self.h, self.t_end, rel_tol=1e-12):
            raise ContractError(f"T={self.t_end} is not a whole number of steps of size {self.h}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)

    @property
    def n_steps(self):
        return round(self.t_end / self.h)

    @property
    def times(self):
        return self.h * np.arange(self.n_steps + 1)

    def with_step(self, h):
        return replace(self, h=h)

    def with_system(self, system):
        return replace(self, system=system)


def _linear_flow(x0, t, theta):
    d = x0.size
    return expm(theta.reshape(d, d) * t) @ x0


def linear_test_system(lam):
    """``f(z) = lam z`` for a scalar or square-matrix ``lam``"""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    if lam.shape[0] != lam.shape[1]:
        raise InvalidParameterError(f"lambda must be square, got shape {lam.shape}")
    if not np.all(np.isfinite(lam)):
        raise InvalidParameterError("lambda must be finite")
    d = lam.shape[0]

    def field_(z, theta):
        return theta.reshape(d, d) @ z

    def jacobian(z, theta):
        return theta.reshape(d, d)

    return OdeSystem(
        name="linear",
        dimension=d,
        theta=lam.ravel(),
        vector_field=field_,
        jacobian=jacobian,
        lipschitz_of=lambda theta: np.linalg.norm(theta.reshape(d, d), 2),
        exact_flow=_linear_flow,
    )


def _check_fhn_theta(theta):
    if theta.shape != (3,):
        raise InvalidParameterError(f"FitzHugh-Nagumo needs 3 parameters, got {theta.size}")
    if theta[2] == 0:
        raise InvalidParameterError("FitzHugh-Nagumo theta3 must be non-zero")


def _fhn_field(z, theta):
    v, r = z[0], z[1]
    a, b, c = theta
    return np.array([c * (v - v**3 / 3.0 + r), -(v - a + b * r) / c])


def _fhn_jacobian(z, theta):
    v = z[0]
    _, b, c = theta
    return np.array([[c * (1.0 - v * v), c], [-1.0 / c, -b / c]])


def fitzhugh_nagumo(theta=(0.2, 0.2, 3.0)):
    """FitzHugh-Nagumo in the (a, b, c) form

    V' = c (V - V^3/3 + R),  R' = -(V - a + b R) / c
    """
    return OdeSystem(
        name="fitzhugh_nagumo",
        dimension=2,
        theta=np.asarray(theta, dtype=float),
        vector_field=_fhn_field,
        jacobian=_fhn_jacobian,
        validate_theta=_check_fhn_theta,
    )


def logistic_growth(rate=1.0):
    """Scalar logistic field ``rate z (1 - z)``.

    The Lipschitz hint ``3 |rate|`` holds on the working interval [-1, 2].
    """

    def field_(z, theta):
        return theta[0] * z * (1.0 - z)

    def jacobian(z, theta):
        return theta[0] * (1.0 - 2.0 * z)

    return OdeSystem(
        name="logistic",
        dimension=1,
        theta=np.array([rate], dtype=float),
        vector_field=field_,
        jacobian=jacobian,
        lipschitz_of=lambda theta: 3.0 * abs(theta[0]),
    )


LOGISTIC_INTERVAL = (-1.0, 2.0)

DEFAULT_INITIAL_STATES = {
    "linear": None,
    "fitzhugh_nagumo": (-1.0, 1.0),
    "logistic": (0.1,),
}


def build_problem(name, params: Optional[Sequence[float]] = None):
    """Resolve a CLI problem name and flat parameter list"""
    params = [] if params is None else [float(p) for p in params]
    if name == "linear":
        if not params:
            return linear_test_system(-1.0)
        d = math.isqrt(len(params))
        if d * d != len(params):
            raise ConfigError(f"linear needs 1 or d*d parameters, got {len(params)}", "params")
        return linear_test_system(np.reshape(params, (d, d)))
    if name == "fitzhugh_nagumo":
        return fitzhugh_nagumo(params or (0.2, 0.2, 3.0))
    if name == "logistic":
        return logistic_growth(*(params or [1.0]))
    raise ConfigError(f"unknown problem '{name}'", "problem")


def default_initial_state(system):
    preset = DEFAULT_INITIAL_STATES.get(system.name)
    if preset is None:
        return np.ones(system.dimension)
    return np.asarray(preset, dtype=float)


def rk4_step(system, z, h):
    k1 = system.f(z)
    k2 = system.f(z + 0.5 * h * k1)
    k3 = system.f(z + 0.5 * h * k2)
    k4 = system.f(z + h * k3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def reference_solution(ivp, refine=100):
    """Ground truth on the coarse grid of ``ivp``.

    Uses the exact flow when the system has one, otherwise classical RK4 at
    ``h / refine`` sampled back onto the coarse grid.
    """
    from .linmultistep import Trajectory

    if refine < 10:
        raise ContractError(f"refine must be at least 10, got {refine}")
    system = ivp.system
    times = ivp.times
    if system.exact_flow is not None:
        states = np.array([system.flow(ivp.x0, t) for t in times])
        return Trajectory(times, states, "reference-exact", system.theta)

    fine_h = ivp.h / refine
    states = np.empty((ivp.n_steps + 1, system.dimension))
    states[0] = ivp.x0
    z = ivp.x0.copy()
    for i in range(ivp.n_steps):
        for _ in range(refine):
            z = rk4_step(system, z, fine_h)
        if not np.all(np.isfinite(z)):
            raise DivergenceError("reference solve produced a non-finite state", step=i + 1)
        states[i + 1] = z
    logger.debug("reference solve for %s: %d fine steps", system.name, ivp.n_steps * refine)
    return Trajectory(times, states, "reference-rk4", system.theta)
