"""Delta-method scale matrix and alpha* scale matching."""

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ContractError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = (1e-3, 10.0, 32)


def h_matrix(system, theta, z_eval, alpha, h, steps):
    """H = alpha h^(2s+1) J J^T with J the Jacobian at ``z_eval``"""
    if not alpha > 0 or not h > 0:
        raise ContractError(f"alpha and h must be positive, got alpha={alpha}, h={h}")
    if theta is not None and not np.array_equal(theta, system.theta):
        system = system.with_theta(theta)
    jac = system.jac(np.asarray(z_eval, dtype=float))
    return alpha * h ** (2 * steps + 1) * (jac @ jac.T)


def log_alpha_grid(lo=DEFAULT_ALPHA_GRID[0], hi=DEFAULT_ALPHA_GRID[1], n=DEFAULT_ALPHA_GRID[2]):
    return np.logspace(np.log10(lo), np.log10(hi), int(n))


@dataclass
class CalibrationResult:
    method: str
    alpha_star: float
    h: float
    alpha_grid: Tuple[float, ...]
    objective: Tuple[float, ...]
    ensemble_size: int
    seed: int
    target_error: float
    mode: str = "semi"
    spreads: Tuple[float, ...] = field(default=())

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ("alpha_grid", "objective", "spreads"):
            data[key] = tuple(float(v) for v in data.get(key, ()))
        return cls(**data)


def ensemble_spread(ivp, method, alpha, size=100, seed=0, mode="semi", workers=1, **callbacks):
    from .ensemble_worker import run_ensemble

    return run_ensemble(ivp, method, alpha, size, seed, mode, workers=workers, **callbacks).terminal_spread()


def deterministic_error(ivp, method, refine=100):
    """|Z_N - x(T)| of the deterministic counterpart of ``method``"""
    from .linmultistep import parse_method, solve_deterministic
    from .problems import reference_solution

    method = parse_method(method)
    reference = reference_solution(ivp, refine)
    solved = solve_deterministic(ivp, method.deterministic_counterpart())
    return float(np.linalg.norm(solved.terminal - reference.terminal))


def calibrate_alpha(ivp, method, alpha_grid=None, ensemble_size=100, seed=0, mode="semi",
                    refine=100, workers=1, match_error: Optional[float] = None, progress_updated=None):
    """Grid search for the alpha whose ensemble spread matches the
    deterministic global error at the terminal time.

    objective(alpha) = |log spread(alpha) - log error|; divergent ensembles
    score +inf. ``match_error`` replaces the deterministic error as target.
    """
    from .linmultistep import parse_method

    method = parse_method(method)
    if not method.probabilistic:
        raise ContractError(f"calibration needs a probabilistic method, got {method}")
    grid = np.asarray(log_alpha_grid() if alpha_grid is None else alpha_grid, dtype=float)
    if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ContractError("alpha grid must be nonempty, positive and sorted")

    target = deterministic_error(ivp, method, refine) if match_error is None else float(match_error)
    if not target > 0:
        raise ContractError(f"matching target must be positive, got {target}")
    log_target = np.log(target)

    objective = np.full(grid.size, np.inf)
    spreads = np.full(grid.size, np.nan)
    for k, alpha in enumerate(grid):
        if progress_updated is not None:
            progress_updated(int(100 * k / grid.size), f"alpha={alpha:.4g}", f"{k + 1}/{grid.size}")
        try:
            spread = ensemble_spread(ivp, method, alpha, ensemble_size, seed, mode, workers)
        except NumericalError as exc:
            logger.warning("alpha=%g: ensemble failed (%s); objective set to inf", alpha, exc)
            continue
        spreads[k] = spread
        if spread > 0:
            objective[k] = abs(np.log(spread) - log_target)
    if not np.isfinite(objective).any():
        raise NumericalError("every alpha on the grid produced a divergent ensemble")

    best = int(np.argmin(objective))
    logger.info("alpha* for %s at h=%g: %.4g (objective %.3g)", method, ivp.h, grid[best], objective[best])
    return CalibrationResult(
        method=method.tag,
        alpha_star=float(grid[best]),
        h=float(ivp.h),
        alpha_grid=tuple(float(a) for a in grid),
        objective=tuple(float(o) for o in objective),
        ensemble_size=int(ensemble_size),
        seed=int(seed),
        target_error=float(target),
        mode=mode,
        spreads=tuple(float(s) for s in spreads),
    )
