import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, DivergenceError, NumericalError
from .linmultistep import Family, parse_method, solve_deterministic
from .prob_explicit import ExplicitNoiseSpec, solve_explicit_randomized
from .prob_implicit import PcnOptions, solve_implicit_probabilistic

logger = logging.getLogger(__name__)


def member_rng(seed, index):
    """Counter-based generator: member ``index`` draws the same numbers
    whatever the worker count"""
    return np.random.default_rng([int(seed), int(index)])


def draw_perturbations(ivp, rng):
    return rng.standard_normal((ivp.n_steps, ivp.system.dimension))


def forward_solve(ivp, method, alpha=None, xi=None, mode="semi", pcn=None, rng=None):
    """Dispatch a solve to the integrator family named by ``method``"""
    method = parse_method(method)
    if not method.probabilistic:
        return solve_deterministic(ivp, method)
    if alpha is None:
        raise ContractError(f"{method} needs a calibrated alpha")
    if method.family is Family.BASHFORTH:
        return solve_explicit_randomized(ivp, method, ExplicitNoiseSpec(alpha, method.steps), xi)
    if mode == "exact":
        return solve_implicit_probabilistic(
            ivp, method, alpha, mode="exact", pcn=pcn or PcnOptions(), rng=rng
        )
    return solve_implicit_probabilistic(ivp, method, alpha, mode="semi", xi=xi)


@dataclass(frozen=True)
class Ensemble:
    """M trajectories on one grid"""

    times: np.ndarray
    members: np.ndarray
    method: str
    theta: np.ndarray
    seed: int

    @property
    def size(self):
        return self.members.shape[0]

    def mean(self):
        return self.members.mean(axis=0)

    def std(self):
        return self.members.std(axis=0)

    def terminal_spread(self):
        """RMS deviation of the terminal states about their mean"""
        terminal = self.members[:, -1, :]
        return float(np.sqrt(np.mean(np.sum((terminal - terminal.mean(axis=0)) ** 2, axis=1))))

    def coverage(self, reference, k=3.0):
        """Fraction of grid points where the reference lies inside mean +/- k std"""
        inside = np.abs(reference.states - self.mean()) <= k * self.std() + 1e-12
        return float(np.mean(np.all(inside, axis=1)))


class EnsembleWorker:
    """Runs M independent randomized solves of one IVP"""

    def __init__(self, ivp, method, alpha=None, size=100, seed=0, mode="semi",
                 pcn: Optional[PcnOptions] = None, workers=1,
                 progress_updated: Optional[Callable[[int, str, str], None]] = None,
                 error_occurred: Optional[Callable[[str], None]] = None):
        if size < 1:
            raise ContractError(f"ensemble size must be positive, got {size}")
        self.ivp = ivp
        self.method = parse_method(method)
        self.alpha = alpha
        self.size = size
        self.seed = seed
        self.mode = mode
        self.pcn = pcn or PcnOptions()
        self.workers = max(1, int(workers))
        self.progress_updated = progress_updated
        self.error_occurred = error_occurred

    def _emit_progress(self, percent, status, detail=""):
        if self.progress_updated is not None:
            self.progress_updated(percent, status, detail)

    def _emit_error(self, message):
        logger.warning(message)
        if self.error_occurred is not None:
            self.error_occurred(message)

    def solve_member(self, index):
        rng = member_rng(self.seed, index)
        if self.method.probabilistic and self.mode == "exact" and self.method.family is Family.MOULTON:
            return forward_solve(self.ivp, self.method, self.alpha, mode="exact", pcn=self.pcn, rng=rng)
        xi = draw_perturbations(self.ivp, rng)
        return forward_solve(self.ivp, self.method, self.alpha, xi=xi, mode=self.mode)

    def _guarded(self, index):
        try:
            return self.solve_member(index).states, None
        except NumericalError as exc:
            return None, f"member {index}: {exc}"

    def run(self):
        self._emit_progress(0, f"Running {self.size} x {self.method}", f"h={self.ivp.h:g}")
        results = []
        if self.workers == 1:
            outcomes = map(self._guarded, range(self.size))
            pool = None
        else:
            pool = ThreadPoolExecutor(max_workers=self.workers)
            outcomes = pool.map(self._guarded, range(self.size))
        try:
            for done, outcome in enumerate(outcomes, start=1):
                results.append(outcome)
                self._emit_progress(int(100 * done / self.size), f"Member {done}/{self.size}", "")
        finally:
            if pool is not None:
                pool.shutdown()

        failures = [message for _, message in results if message is not None]
        for message in failures:
            self._emit_error(message)
        if failures:
            raise DivergenceError(f"{len(failures)} of {self.size} ensemble members failed")

        members = np.stack([states for states, _ in results])
        logger.info("ensemble of %d %s trajectories complete", self.size, self.method)
        return Ensemble(self.ivp.times, members, self.method.tag, self.ivp.system.theta, self.seed)


def run_ensemble(ivp, method, alpha=None, size=100, seed=0, mode="semi", pcn=None, workers=1, **callbacks):
    return EnsembleWorker(ivp, method, alpha, size, seed, mode, pcn, workers, **callbacks).run()
