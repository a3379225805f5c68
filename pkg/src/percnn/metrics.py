"""Evaluation metrics: accumulative RMSE and the FD physics residual."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import solver
from .fields import Trajectory
from .solver import PdeSystem


@dataclass(frozen=True)
class ErrorCurve:
    """Metric values over time; t is strictly increasing."""

    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)
        if t.shape != v.shape or t.ndim != 1:
            raise ValueError("t and values must be 1D arrays of equal length")
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("t must be strictly increasing")

    def write_csv(self, path, name: str):
        with open(path, "w") as f:
            f.write(f"t,{name}\n")
            for t, v in zip(self.t, self.values):
                f.write(f"{t!r},{v!r}\n")


def accumulative_rmse(pred: Trajectory, ref: Trajectory) -> ErrorCurve:
    """RMSE pooled over all snapshots up to each time.

    Value k is sqrt(mean of squared errors over snapshots 1..k), with n =
    channels * nodes entries per snapshot, so the first value equals the
    elementwise RMS of the first frame.
    """
    if pred.spec != ref.spec or pred.channels != ref.channels:
        raise ValueError("prediction and reference shapes differ")
    if len(pred.frames) != len(ref.frames) or abs(pred.dt - ref.dt) > 1e-12 * pred.dt:
        raise ValueError("prediction and reference time grids differ")
    n = pred.channels * pred.spec.n_nodes
    sse = np.empty(len(pred.frames))
    for i, (p, r) in enumerate(zip(pred.frames, ref.frames)):
        d = p.data - r.data
        sse[i] = np.sum(d * d)
    cum = np.cumsum(sse)
    k = np.arange(1, len(sse) + 1)
    return ErrorCurve(pred.times, np.sqrt(cum / (n * k)))


def physics_error(pred: Trajectory, system: PdeSystem) -> ErrorCurve:
    """RMS residual of the governing equations on interior frames.

    Time derivative by central differences, spatial terms by the same FD
    stencils the solver uses; the first and last frames are dropped.
    """
    if len(pred.frames) < 3:
        raise ValueError("physics error needs at least 3 frames for central differences")
    values = []
    for k in range(1, len(pred.frames) - 1):
        ut = (pred.frames[k + 1].data - pred.frames[k - 1].data) / (2.0 * pred.dt)
        resid = ut - solver.rhs(system, pred.frames[k]).data
        values.append(np.sqrt(np.mean(resid * resid)))
    return ErrorCurve(pred.times[1:-1], np.asarray(values))
