import json
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Union

from core.calibration import DEFAULT_ALPHA_GRID
from core.errors import ConfigError, InvalidParameterError, PamError
from core.exporters import read_calibration
from core.linmultistep import parse_method
from core.problems import Ivp, build_problem, default_initial_state

logger = logging.getLogger(__name__)

COMMANDS = ("solve", "ensemble", "calibrate", "convergence", "infer")


@dataclass
class ExperimentConfig:
    """Everything one subcommand needs; JSON keys match the field names"""

    problem: Optional[str] = None
    params: List[float] = field(default_factory=list)
    x0: Optional[List[float]] = None
    method: Union[str, List[str]] = "am0-prob"
    h: Union[float, List[float]] = 0.1
    t_end: float = 20.0
    ensemble_size: int = 100
    mode: str = "semi"
    alpha: Union[None, float, Dict[str, float]] = None
    calibration_file: Union[None, str, List[str]] = None
    seed: int = 0
    output_dir: str = "results"
    refine: int = 100
    workers: int = 1
    alpha_grid: List[float] = field(default_factory=lambda: list(DEFAULT_ALPHA_GRID))
    iterations: int = 11000
    burn_in: int = 1000
    thin: int = 10
    noise_var: float = 0.01
    pcn_beta: float = 0.5
    pcn_iterations: int = 60
    pcn_burn_in: int = 10

    @property
    def h_list(self):
        values = self.h if isinstance(self.h, (list, tuple)) else [self.h]
        return sorted((float(v) for v in values), reverse=True)

    @property
    def method_list(self):
        return list(self.method) if isinstance(self.method, (list, tuple)) else [self.method]

    def system(self):
        if not self.problem:
            raise ConfigError("missing required field 'problem'", "problem")
        try:
            return build_problem(self.problem, self.params)
        except InvalidParameterError as exc:
            raise ConfigError(f"invalid params for '{self.problem}': {exc}", "params") from exc

    def ivp(self, h=None, system=None):
        system = system or self.system()
        x0 = self.x0 if self.x0 is not None else default_initial_state(system)
        try:
            return Ivp(system, x0, self.t_end, self.h_list[0] if h is None else h)
        except PamError as exc:
            raise ConfigError(str(exc), "h") from exc

    def methods(self):
        try:
            return [parse_method(m) for m in self.method_list]
        except InvalidParameterError as exc:
            raise ConfigError(str(exc), "method") from exc

    def resolve_alpha(self, method=None):
        """alpha for ``method``: explicit value, per-method map, then calibration files"""
        tag = parse_method(method).tag if method is not None else None
        if isinstance(self.alpha, dict):
            alphas = self.alpha_map()
            if tag is None and len(alphas) == 1:
                return next(iter(alphas.values()))
            if tag not in alphas:
                raise ConfigError(f"no alpha given for method '{tag}'", "alpha")
            return alphas[tag]
        if self.alpha is not None:
            return float(self.alpha)
        if self.calibration_file:
            return self._calibrated_alpha(tag)
        raise ConfigError("probabilistic methods need 'alpha' or 'calibration_file'", "alpha")

    def alpha_map(self):
        try:
            return {parse_method(k).tag: float(v) for k, v in self.alpha.items()}
        except (InvalidParameterError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad per-method alpha: {exc}", "alpha") from exc

    def _calibrated_alpha(self, tag):
        paths = self.calibration_file
        paths = list(paths) if isinstance(paths, (list, tuple)) else [paths]
        results = []
        for path in paths:
            try:
                results.append((path, read_calibration(path)))
            except (OSError, ValueError, TypeError, KeyError) as exc:
                raise ConfigError(f"cannot read calibration file: {exc}", "calibration_file") from exc
        if tag is None and len(results) == 1:
            path, result = results[0]
        else:
            matching = [(p, r) for p, r in results if r.method == tag]
            if not matching:
                made_for = ", ".join(f"{p} ({r.method})" for p, r in results)
                raise ConfigError(f"no calibration file for '{tag}': got {made_for}", "calibration_file")
            path, result = matching[0]
        logger.info("alpha*=%g for %s from %s", result.alpha_star, result.method, path)
        return result.alpha_star

    def validate(self, command):
        if command not in COMMANDS:
            raise ConfigError(f"unknown command '{command}'", "command")
        system = self.system()
        methods = self.methods()
        if command != "infer" and len(methods) != 1:
            raise ConfigError(f"'{command}' takes a single method", "method")
        hs = self.h_list
        if not hs or any(not (h > 0 and math.isfinite(h)) for h in hs):
            raise ConfigError(f"step sizes must be positive, got {self.h}", "h")
        for h in hs:
            self.ivp(h, system)
        if self.mode not in ("semi", "exact"):
            raise ConfigError(f"mode must be 'semi' or 'exact', got '{self.mode}'", "mode")
        if self.refine < 10:
            raise ConfigError("refine must be at least 10", "refine")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1", "workers")
        if command in ("ensemble", "calibrate") and not methods[0].probabilistic:
            raise ConfigError(f"'{command}' needs a probabilistic method", "method")
        if command == "ensemble" and self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be positive", "ensemble_size")
        if command == "convergence" and len(hs) < 4:
            raise ConfigError("convergence needs at least 4 step sizes", "h")
        if command == "calibrate" and (len(self.alpha_grid) != 3 or self.alpha_grid[0] <= 0):
            raise ConfigError("alpha_grid must be [lo, hi, n] with lo > 0", "alpha_grid")
        if command == "infer":
            if not 0 <= self.burn_in < self.iterations or self.thin < 1:
                raise ConfigError("need 0 <= burn_in < iterations and thin >= 1", "burn_in")
            if self.noise_var <= 0:
                raise ConfigError("noise_var must be positive", "noise_var")
            if any(m.probabilistic and m.family.value == "am" for m in methods) and self.mode != "semi":
                raise ConfigError("inference supports only the semi-implicit mode", "mode")
        if command != "calibrate":
            for m in methods:
                if m.probabilistic:
                    self.resolve_alpha(m)
        return self


INT_KEYS = ("ensemble_size", "seed", "refine", "workers", "iterations", "burn_in", "thin",
            "pcn_iterations", "pcn_burn_in")
FLOAT_KEYS = ("t_end", "noise_var", "pcn_beta")
FLOAT_LIST_KEYS = ("params", "x0", "alpha_grid")
STR_KEYS = ("problem", "mode", "output_dir")


def _as_int(value):
    if isinstance(value, bool):
        raise ValueError(f"expected an integer, got {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"expected an integer, got {value!r}")
        return int(value)
    return int(str(value).strip())


def _as_float_list(value):
    if isinstance(value, (str, bytes)) or not hasattr(value, "__iter__"):
        raise ValueError(f"expected a list of numbers, got {value!r}")
    return [float(v) for v in value]


def coerce_values(values):
    """Convert JSON/flag values to the field types, ConfigError naming the key"""
    out = dict(values)
    for key, value in values.items():
        if value is None:
            continue
        try:
            if key in INT_KEYS:
                out[key] = _as_int(value)
            elif key in FLOAT_KEYS:
                out[key] = float(value)
            elif key in FLOAT_LIST_KEYS:
                out[key] = _as_float_list(value)
            elif key == "h":
                out[key] = _as_float_list(value) if isinstance(value, (list, tuple)) else float(value)
            elif key in STR_KEYS:
                if not isinstance(value, str):
                    raise TypeError(f"expected a string, got {value!r}")
            elif key == "alpha" and not isinstance(value, dict):
                out[key] = float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for '{key}': {exc}", key) from exc
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file at ``path``, then non-None ``overrides``"""
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config '{path}': {exc}", "config") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config '{path}' must hold a JSON object", "config")
        values.update(loaded)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}", unknown[0])
    return ExperimentConfig(**coerce_values(values))
