import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from .calibration import CalibrationResult
from .ensemble_worker import Ensemble
from .linmultistep import Trajectory

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def state_columns(d):
    return [f"z_{k + 1}" for k in range(d)]


def theta_columns(q):
    return [f"theta{k + 1}" for k in range(q)]


class ResultExporter:
    """Writes solver, ensemble, calibration and MCMC results into one directory.

    CSV files are UTF-8 with a header row and ``%.17g`` floats so that a
    given run always produces the same bytes.
    """

    def __init__(self, output_dir):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return self.output_dir / name

    def write_frame(self, frame, name):
        target = self.path(name)
        frame.to_csv(target, index=False, float_format=FLOAT_FORMAT, encoding="utf-8", lineterminator="\n")
        logger.info("wrote %s (%d rows)", target, len(frame))
        return target

    def write_json(self, payload, name):
        target = self.path(name)
        with open(target, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info("wrote %s", target)
        return target

    @staticmethod
    def trajectory_frame(trajectory):
        frame = pd.DataFrame(trajectory.states, columns=state_columns(trajectory.states.shape[1]))
        frame.insert(0, "t", trajectory.times)
        return frame

    @staticmethod
    def ensemble_long_frame(ensemble):
        m, n, d = ensemble.members.shape
        frame = pd.DataFrame(ensemble.members.reshape(m * n, d), columns=state_columns(d))
        frame.insert(0, "t", np.tile(ensemble.times, m))
        frame.insert(0, "rep", np.repeat(np.arange(m), n))
        return frame

    @staticmethod
    def ensemble_summary_frame(ensemble):
        d = ensemble.members.shape[2]
        mean, std = ensemble.mean(), ensemble.std()
        columns = {"t": ensemble.times}
        for k in range(d):
            columns[f"mean_{k + 1}"] = mean[:, k]
            columns[f"std_{k + 1}"] = std[:, k]
        return pd.DataFrame(columns)

    @staticmethod
    def chain_frame(chain):
        frame = pd.DataFrame(chain.samples, columns=theta_columns(chain.samples.shape[1]))
        frame.insert(0, "iter", np.arange(1, chain.iterations + 1))
        frame["logpost"] = chain.log_posterior
        frame["accepted"] = chain.accepted.astype(int)
        return frame

    def export_trajectory(self, trajectory, name="trajectory.csv"):
        return self.write_frame(self.trajectory_frame(trajectory), name)

    def export_ensemble(self, ensemble, name="ensemble.csv", summary_name="ensemble_summary.csv"):
        return (
            self.write_frame(self.ensemble_long_frame(ensemble), name),
            self.write_frame(self.ensemble_summary_frame(ensemble), summary_name),
        )

    def export_calibration(self, result, name="calibration.json"):
        return self.write_json(result.to_dict(), name)

    def export_chain(self, chain, name):
        return self.write_frame(self.chain_frame(chain), name)

    def export_posterior_summary(self, summary, chain, name):
        payload = {
            "method": chain.method,
            "h": chain.h,
            "seed": chain.seed,
            "iterations": chain.iterations,
            "retained": int(summary.samples.shape[0]),
            "acceptance_rate": chain.acceptance_rate,
            "forward_solves": chain.forward_solves,
            "xi_refreshes": chain.xi_refreshes,
            "divergent_proposals": int(chain.diverged.sum()),
            "parameters": {
                name_: {k: float(v) for k, v in row.items()} for name_, row in summary.table.iterrows()
            },
        }
        return self.write_json(payload, name)

    def export_convergence(self, result, name="convergence.csv"):
        frame = pd.DataFrame({
            "h": result.h,
            "rms_error": result.rms_error,
            "residual": result.residuals,
        })
        self.write_frame(frame, name)
        return self.write_json(
            {"method": result.method, "slope": result.slope, "intercept": result.intercept,
             "h": result.h.tolist()},
            Path(name).with_suffix(".json").name,
        )


def read_trajectory_csv(path, method="", theta=()):
    frame = pd.read_csv(path, float_precision="round_trip")
    states = frame[[c for c in frame.columns if c.startswith("z_")]].to_numpy()
    return Trajectory(frame["t"].to_numpy(), states, method, np.asarray(theta, dtype=float))


def read_ensemble_csv(path, method="", theta=(), seed=0):
    frame = pd.read_csv(path, float_precision="round_trip")
    cols = [c for c in frame.columns if c.startswith("z_")]
    m = int(frame["rep"].max()) + 1
    members = frame[cols].to_numpy().reshape(m, -1, len(cols))
    times = frame.loc[frame["rep"] == 0, "t"].to_numpy()
    return Ensemble(times, members, method, np.asarray(theta, dtype=float), seed)


def read_chain_csv(path):
    return pd.read_csv(path, float_precision="round_trip")


def read_calibration(path):
    with open(path, encoding="utf-8") as f:
        return CalibrationResult.from_dict(json.load(f))
