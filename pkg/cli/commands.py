"""The experiment subcommands: solve, ensemble, calibrate, convergence, infer."""

import logging
from contextlib import contextmanager

import numpy as np
from tqdm import tqdm

from core.calibration import calibrate_alpha, log_alpha_grid
from core.convergence import convergence_study
from core.ensemble_worker import EnsembleWorker, draw_perturbations, forward_solve, member_rng
from core.exporters import ResultExporter
from core.inference import McmcOptions, generate_synthetic_data, mwg_mcmc, posterior_summary
from core.linmultistep import Family
from core.prob_implicit import PcnOptions
from core.problems import Ivp, reference_solution

from .plots import PlotScriptWriter

logger = logging.getLogger(__name__)


@contextmanager
def progress_bar(description):
    """tqdm bar driven by (percent, status, detail) callbacks"""
    bar = tqdm(total=100, desc=description, leave=False, disable=None)

    def update(percent, status, detail):
        bar.n = percent
        bar.set_postfix_str(f"{status} {detail}".strip(), refresh=False)
        bar.refresh()

    try:
        yield update
    finally:
        bar.close()


def pcn_options(config):
    return PcnOptions(config.pcn_beta, config.pcn_iterations, config.pcn_burn_in)


def solve_once(config, ivp, method, alpha):
    """Single trajectory; probabilistic methods use member 0 of the seed"""
    if not method.probabilistic:
        return forward_solve(ivp, method)
    rng = member_rng(config.seed, 0)
    if method.family is Family.MOULTON and config.mode == "exact":
        return forward_solve(ivp, method, alpha, mode="exact", pcn=pcn_options(config), rng=rng)
    return forward_solve(ivp, method, alpha, xi=draw_perturbations(ivp, rng))


def run_solve(config):
    config.validate("solve")
    method = config.methods()[0]
    alpha = config.resolve_alpha(method) if method.probabilistic else None
    trajectory = solve_once(config, config.ivp(), method, alpha)
    return ResultExporter(config.output_dir).export_trajectory(trajectory)


def run_ensemble(config):
    config.validate("ensemble")
    method = config.methods()[0]
    alpha = config.resolve_alpha(method)
    ivp = config.ivp()
    exporter = ResultExporter(config.output_dir)
    with progress_bar(f"ensemble {method}") as update:
        worker = EnsembleWorker(ivp, method, alpha, config.ensemble_size, config.seed, config.mode,
                                pcn_options(config), config.workers, progress_updated=update)
        ensemble = worker.run()
    paths = exporter.export_ensemble(ensemble)
    reference = reference_solution(ivp, config.refine)
    exporter.export_trajectory(reference, "reference.csv")
    exporter.export_trajectory(forward_solve(ivp, method.deterministic_counterpart()), "deterministic.csv")
    coverage = ensemble.coverage(reference, 3.0)
    logger.info("3-sigma envelope covers the reference at %.1f%% of grid points", 100 * coverage)
    PlotScriptWriter(config.output_dir).ensemble_script(ivp.system.dimension, method.tag)
    return paths


def run_calibrate(config):
    config.validate("calibrate")
    method = config.methods()[0]
    exporter = ResultExporter(config.output_dir)
    grid = log_alpha_grid(*config.alpha_grid)
    results = []
    for h in config.h_list:
        with progress_bar(f"calibrate {method} h={h:g}") as update:
            result = calibrate_alpha(config.ivp(h), method, grid, config.ensemble_size, config.seed,
                                     config.mode, config.refine, config.workers, progress_updated=update)
        results.append(result)
        if len(config.h_list) > 1:
            exporter.export_calibration(result, f"calibration_h{h:g}.json")
    exporter.export_calibration(results[0])
    return results


def run_convergence(config):
    config.validate("convergence")
    method = config.methods()[0]
    alpha = config.resolve_alpha(method) if method.probabilistic else None
    system = config.system()
    result = convergence_study(lambda h: config.ivp(h, system), method, config.h_list, alpha,
                               config.ensemble_size, config.seed, config.mode, config.refine, config.workers)
    exporter = ResultExporter(config.output_dir)
    exporter.export_convergence(result)
    PlotScriptWriter(config.output_dir).convergence_script(method.tag)
    return result


def pair_seed(seed, method_index, h_index):
    return int(np.random.SeedSequence([int(seed), method_index, h_index]).generate_state(1)[0])


def run_infer(config):
    """One chain per (method, h) on a shared synthetic dataset"""
    config.validate("infer")
    methods = config.methods()
    system = config.system()
    truth_ivp = config.ivp(config.h_list[-1], system)
    dataset = generate_synthetic_data(truth_ivp, config.seed, noise_var=config.noise_var, refine=config.refine)
    exporter = ResultExporter(config.output_dir)
    panels, summaries = {}, {}
    for mi, method in enumerate(methods):
        alpha = config.resolve_alpha(method) if method.probabilistic else None
        for hi, h in enumerate(config.h_list):
            ivp = Ivp(system, truth_ivp.x0, config.t_end, h)
            opts = McmcOptions(config.iterations, config.burn_in, pair_seed(config.seed, mi, hi),
                               theta0=tuple(system.theta), mode=config.mode)
            with progress_bar(f"infer {method} h={h:g}") as update:
                chain = mwg_mcmc(dataset, ivp, method, alpha,
                                 opts=opts, progress_updated=update)
            summary = posterior_summary(chain, config.burn_in, config.thin)
            stem = f"{method.tag}_h{h:g}"
            panels[(method.tag, h)] = exporter.export_chain(chain, f"chain_{stem}.csv")
            exporter.export_posterior_summary(summary, chain, f"summary_{stem}.json")
            summaries[(method.tag, h)] = summary
    components = (2, 3) if system.theta.size >= 3 else (1,)
    PlotScriptWriter(config.output_dir).posterior_script(panels, config.burn_in, config.thin,
                                                         truth=tuple(system.theta), components=components)
    return summaries


COMMAND_HANDLERS = {
    "solve": run_solve,
    "ensemble": run_ensemble,
    "calibrate": run_calibrate,
    "convergence": run_convergence,
    "infer": run_infer,
}
