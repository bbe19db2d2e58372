"""CSV artifacts of a run, all written through pandas."""
import logging
import os

import numpy as np
import pandas as pd

from fbsdej.net import save_params

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


def _write(frame: pd.DataFrame, output_dir, name: str) -> str:
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, name)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def write_training(report, output_dir, smoothing_window: int = 100) -> list:
    """checkpoints.csv, runs.csv, training_loss.csv and one params_run<k>.ckpt per run."""
    paths = [_write(report.checkpoints, output_dir, "checkpoints.csv"),
             _write(report.per_run, output_dir, "runs.csv")]
    if report.training_loss.size:
        history = pd.DataFrame({
            "iteration": np.arange(report.training_loss.shape[1]),
            "loss_mean": np.nanmean(report.training_loss, axis=0),
            "loss_smoothed": report.smoothed_loss(smoothing_window),
        })
        paths.append(_write(history, output_dir, "training_loss.csv"))
    for run, params in enumerate(report.params):
        path = os.path.join(output_dir, f"params_run{run}.ckpt")
        save_params(params, path)
        paths.append(path)
    return paths


def write_sweeps(history: pd.DataFrame, output_dir) -> str:
    return _write(history, output_dir, "sweeps.csv")


def write_error_report(report, output_dir) -> str:
    return _write(report.to_frame(), output_dir, "error_report.csv")


def write_rate_report(report, output_dir) -> str:
    return _write(report.to_frame(), output_dir, "rate_report.csv")


def write_verify(table: pd.DataFrame, output_dir) -> str:
    return _write(table, output_dir, "verify.csv")
