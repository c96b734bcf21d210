"""Empirical convergence orders from terminal errors over a ladder of h."""

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .linmultistep import parse_method
from .problems import reference_solution

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConvergenceResult:
    method: str
    h: np.ndarray
    rms_error: np.ndarray
    slope: float
    intercept: float

    @property
    def residuals(self):
        return np.log(self.rms_error) - (self.intercept + self.slope * np.log(self.h))


def fit_order(h, errors):
    """Least-squares slope and intercept of log(error) against log(h)"""
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if h.size < 2 or np.any(errors <= 0):
        raise ContractError("order fit needs at least two positive errors")
    slope, intercept = np.polyfit(np.log(h), np.log(errors), 1)
    return float(slope), float(intercept)


def terminal_rms_error(ivp, method, alpha=None, ensemble_size=200, seed=0, mode="semi",
                       refine=100, workers=1):
    """Root of E|Z_N - x(T)|^2; the expectation is over the ensemble for
    probabilistic methods"""
    from .ensemble_worker import forward_solve, run_ensemble

    method = parse_method(method)
    truth = reference_solution(ivp, refine).terminal
    if not method.probabilistic:
        return float(np.linalg.norm(forward_solve(ivp, method).terminal - truth))
    ensemble = run_ensemble(ivp, method, alpha, ensemble_size, seed, mode, workers=workers)
    sq = np.sum((ensemble.members[:, -1, :] - truth) ** 2, axis=1)
    return float(np.sqrt(np.mean(sq)))


def convergence_study(ivp_for_h: Callable[[float], object], method, h_list: Sequence[float],
                      alpha=None, ensemble_size=200, seed=0, mode="semi", refine=100, workers=1):
    if len(h_list) < 2:
        raise ContractError("convergence study needs at least two step sizes")
    h = np.array(sorted(h_list, reverse=True), dtype=float)
    errors = np.array([
        terminal_rms_error(ivp_for_h(step), method, alpha, ensemble_size, seed, mode, refine, workers)
        for step in h
    ])
    slope, intercept = fit_order(h, errors)
    tag = parse_method(method).tag
    logger.info("%s: empirical order %.3f over h=%s", tag, slope, h.tolist())
    return ConvergenceResult(tag, h, errors, slope, intercept)
