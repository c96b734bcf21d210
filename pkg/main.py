import argparse
import logging
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def alpha_value(text):
    """A single alpha, or per-method pairs like am0-prob=0.3,am1-prob=0.5"""
    if "=" not in text:
        return float(text)
    pairs = (item.split("=", 1) for item in text.split(",") if item.strip())
    return {tag.strip(): float(value) for tag, value in pairs}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pam",
        description="Probabilistic Adams-Moulton integrators: solves, ensembles, calibration and inference",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment file; flags override its values")
    common.add_argument("--problem", help="linear | fitzhugh_nagumo | logistic")
    common.add_argument("--params", type=float_list, help="comma-separated problem parameters")
    common.add_argument("--x0", type=float_list, help="comma-separated initial state")
    common.add_argument("--method", help="e.g. am0-prob, ab2-det (comma-separated list for infer)")
    common.add_argument("--h", type=float_list, help="step size, or comma-separated list")
    common.add_argument("--t-end", dest="t_end", type=float)
    common.add_argument("--ensemble-size", dest="ensemble_size", type=int)
    common.add_argument("--mode", choices=("semi", "exact"))
    common.add_argument("--alpha", type=alpha_value, help="alpha, or method=alpha pairs for infer")
    common.add_argument("--calibration-file", dest="calibration_file",
                        help="calibration JSON, or comma-separated files one per method")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--refine", type=int)
    common.add_argument("--workers", type=int)

    sub.add_parser("solve", parents=[common], help="single trajectory to CSV")
    sub.add_parser("ensemble", parents=[common], help="Monte Carlo ensemble with summary and plot script")
    calibrate = sub.add_parser("calibrate", parents=[common], help="alpha* grid search")
    calibrate.add_argument("--alpha-grid", dest="alpha_grid", type=float_list, help="lo,hi,n")
    sub.add_parser("convergence", parents=[common], help="empirical order over a list of h")
    infer = sub.add_parser("infer", parents=[common], help="Metropolis-within-Gibbs parameter inference")
    infer.add_argument("--iterations", type=int)
    infer.add_argument("--burn-in", dest="burn_in", type=int)
    infer.add_argument("--thin", type=int)
    infer.add_argument("--noise-var", dest="noise_var", type=float)
    return parser


def overrides_from(args):
    skip = {"command", "config", "verbose"}
    values = {k: v for k, v in vars(args).items() if k not in skip}
    if values.get("h") is not None and len(values["h"]) == 1:
        values["h"] = values["h"][0]
    if values.get("method") and "," in values["method"]:
        values["method"] = [m.strip() for m in values["method"].split(",")]
    if values.get("calibration_file") and "," in values["calibration_file"]:
        values["calibration_file"] = [p.strip() for p in values["calibration_file"].split(",") if p.strip()]
    return values


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    from cli.commands import COMMAND_HANDLERS
    from cli.config import load_config
    from core.errors import ContractError, NumericalError

    try:
        config = load_config(args.config, overrides_from(args))
        COMMAND_HANDLERS[args.command](config)
        return EXIT_OK
    except ContractError as e:
        field = getattr(e, "field", None)
        where = f" [{field}]" if field else ""
        print(f"config error{where}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
