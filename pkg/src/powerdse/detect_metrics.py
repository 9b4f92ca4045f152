"""Detection statistics and error metrics for estimator runs.

Rates are defined per channel and per step: among the (step, channel)
pairs after the warmup and inside the attack window, the detection rate is
the flagged fraction on attacked channels and the false-alarm rate is the
flagged fraction on the remaining channels.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .powermodel import h_eval

EPS_DIV = 1e-9

SUMMARY_FIELDS = ("estimator", "final_rel_err", "mean_rel_err", "detection_rate",
                  "false_alarm_rate", "wall_time_s")


class UndefinedRatio(ArithmeticError):
    """Predicted measurement variance is not positive."""


class UndefinedMetric(ArithmeticError):
    """Every component of the true state is too close to zero."""


@dataclass
class InnovationRecord:
    t: float
    innovation: np.ndarray
    ratio: np.ndarray | None = None
    flags: np.ndarray | None = None


@dataclass
class RunMetrics:
    rel_err_norm: np.ndarray
    final_err: float
    detection_rate: float = 0.0
    false_alarm_rate: float = 0.0
    wall_time: float = 0.0
    excluded: int = 0
    mean_err: float = field(default=float("nan"))

    def __post_init__(self):
        for r in (self.detection_rate, self.false_alarm_rate):
            if not 0.0 <= r <= 1.0:
                raise ValueError("rates must lie in [0, 1]")


def innovation_ratio(y, yhat, pyy):
    """``(y - yhat) / sqrt(pyy)``; works elementwise on arrays."""
    pyy = np.asarray(pyy, dtype=float)
    if np.any(~(pyy > 0)):
        raise UndefinedRatio("predicted measurement variance must be positive")
    out = (np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)) / np.sqrt(pyy)
    return float(out) if out.ndim == 0 else out


def observer_innovation(y, xhat, Y, model) -> np.ndarray:
    """Raw residual ``y - h(xhat)`` used for the observer, which has no covariance."""
    return np.asarray(y, dtype=float) - h_eval(xhat, Y, model)


def rel_error_norm(x, xhat, eps_div: float = EPS_DIV, return_excluded: bool = False):
    """``||(x - xhat) / x||_2`` over components with ``|x_i| > eps_div``.

    Accepts single states or stacks ``(T, n)``; the excluded-component
    count is the total over all rows.
    """
    x = np.asarray(x, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    keep = np.abs(x) > eps_div
    if not np.all(np.any(keep, axis=-1)):
        raise UndefinedMetric("all true state components are within eps_div of zero")
    rel = np.where(keep, (x - xhat) / np.where(keep, x, 1.0), 0.0)
    val = np.sqrt(np.sum(rel * rel, axis=-1))
    if val.ndim == 0:
        val = float(val)
    if return_excluded:
        return val, int(np.count_nonzero(~keep))
    return val


def flag_compromised(times, ratios, attacked, threshold: float = 3.0, warmup: float = 2.0,
                     window=(0.0, np.inf)):
    """Threshold ``|ratio|`` per channel and step.

    Returns ``(flags, detection_rate, false_alarm_rate)``. ``attacked`` lists
    the attacked channel indices. Only steps with ``t >= warmup`` inside
    ``window`` are scored; a rate with no eligible samples is 0.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    times = np.asarray(times, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    flags = np.abs(ratios) > threshold
    tol = 1e-9
    rows = (times >= warmup - tol) & (times >= window[0] - tol) & (times <= window[1] + tol)
    mask = np.zeros(ratios.shape[1], dtype=bool)
    mask[np.asarray(list(attacked), dtype=int)] = True
    scored = flags[rows]

    def rate(cols):
        block = scored[:, cols]
        return float(block.mean()) if block.size else 0.0

    return flags, rate(mask), rate(~mask)


def summarize(rel_err, times, detection_rate=0.0, false_alarm_rate=0.0, wall_time=0.0,
              excluded=0, mean_from: float = 0.0) -> RunMetrics:
    rel_err = np.asarray(rel_err, dtype=float)
    times = np.asarray(times, dtype=float)
    sel = times >= mean_from - 1e-9
    return RunMetrics(rel_err, float(rel_err[-1]), detection_rate, false_alarm_rate,
                      wall_time, excluded, float(np.mean(rel_err[sel])))


def write_summary_csv(path, rows) -> None:
    """``rows`` is a sequence of ``(name, RunMetrics)``."""
    with open(Path(path), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SUMMARY_FIELDS)
        for name, met in rows:
            wr.writerow([name, repr(met.final_err), repr(met.mean_err),
                         repr(met.detection_rate), repr(met.false_alarm_rate),
                         repr(met.wall_time)])


def read_summary_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != SUMMARY_FIELDS:
            raise ValueError(f"{path}: unexpected summary header {rd.fieldnames}")
        out = []
        for row in rd:
            rec = {"estimator": row["estimator"]}
            rec.update({k: float(row[k]) for k in SUMMARY_FIELDS[1:]})
            out.append(rec)
    return out
