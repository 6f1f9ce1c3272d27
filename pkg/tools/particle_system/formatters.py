"""Tabular formatting of trajectories and study reports.

This module turns simulation results into pandas DataFrames with the fixed
column layouts used for CSV output.
"""

import numpy as np
import pandas as pd

from . import config


def trajectory_frame(trajectory) -> pd.DataFrame:
    """Flatten a trajectory into one row per (grid point, particle).

    Args:
        trajectory: Trajectory with frames of shape [n_steps + 1, N, d].

    Returns:
        pd.DataFrame: DataFrame with columns:
            - t (float): Grid time
            - i (int): Particle index
            - x_1 .. x_d (float): State components
    """
    frames = trajectory.frames
    steps, particles, d = frames.shape
    states = frames.reshape(steps * particles, d)
    columns = config.TRAJECTORY_COLUMNS + [f"x_{c + 1}" for c in range(d)]
    data = [np.repeat(trajectory.grid.times, particles), np.tile(np.arange(particles), steps)]
    data += [states[:, c] for c in range(d)]
    return pd.DataFrame(dict(zip(columns, data)), columns=columns)


def report_frame(report) -> pd.DataFrame:
    """Standardize a study report into the study CSV layout.

    The fitted slope and its bootstrap interval are repeated on every row; an
    undefined slope is written as an empty field.

    Args:
        report: StudyReport to format.

    Returns:
        pd.DataFrame: DataFrame with columns level, error, std_error, M, slope,
            slope_lo, slope_hi.
    """
    low, high = report.slope_interval or (np.nan, np.nan)
    slope = np.nan if report.slope is None else report.slope
    rows = [
        [r.level, r.error, r.std_error, r.replicates, slope, low, high]
        for r in report.records
    ]
    df = pd.DataFrame(rows, columns=config.STUDY_COLUMNS)
    df["M"] = df["M"].astype(int)
    return df
