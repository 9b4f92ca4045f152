"""Ground-truth simulation: 4th-order model plus an unknown-input channel.

The truth system runs on the post-fault network from the pre-fault
equilibrium. Model uncertainty enters as ``Bw @ w(t)``; Gaussian process
noise is injected once per measurement sample.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .powermodel import SystemCase, f_eval, h_eval

N_UNKNOWN_INPUTS = 8


class SimulationError(RuntimeError):
    """Raised when the integrated trajectory becomes non-finite."""


def w_eval(t, omega_u: float = 100.0) -> np.ndarray:
    """Unknown-input signal ``w(t)``; a scalar ``t`` gives shape ``(8,)``."""
    t = np.asarray(t, dtype=float)
    c, s = np.cos(omega_u * t), np.sin(omega_u * t)
    return np.stack([
        0.5 * c, 0.5 * s, 0.5 * c, 0.5 * s,
        -np.exp(-5.0 * t),
        0.2 * np.exp(-t) * c,
        0.2 * c,
        0.1 * s,
    ], axis=-1)


def rk4_step(f: Callable, x, u, dt: float, t: float = 0.0):
    """One classical Runge-Kutta step of ``x' = f(x, u, t)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = f(x, u, t)
    k2 = f(x + 0.5 * dt * k1, u, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, u, t + 0.5 * dt)
    k4 = f(x + dt * k3, u, t + dt)
    out = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise SimulationError(f"non-finite state after step at t = {t + dt:.6f} s")
    return out


@dataclass
class UnknownInputSpec:
    Bw: np.ndarray
    omega_u: float = 100.0
    seed: int | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        self.Bw = np.asarray(self.Bw, dtype=float)
        if self.Bw.ndim != 2 or self.Bw.shape[1] != N_UNKNOWN_INPUTS:
            raise ValueError(f"Bw must have {N_UNKNOWN_INPUTS} columns")

    @classmethod
    def zero(cls, n: int, omega_u: float = 100.0) -> "UnknownInputSpec":
        return cls(Bw=np.zeros((n, N_UNKNOWN_INPUTS)), omega_u=omega_u)

    @classmethod
    def random(cls, delta_max, seed: int, fraction: float = 0.5,
               omega_u: float = 100.0) -> "UnknownInputSpec":
        """Row ``i`` of ``Bw`` is drawn from ``N(0, (fraction * delta_max[i])**2)``."""
        scale = fraction * np.asarray(delta_max, dtype=float)
        rng = np.random.default_rng(seed)
        Bw = rng.standard_normal((scale.size, N_UNKNOWN_INPUTS)) * scale[:, None]
        return cls(Bw=Bw, omega_u=omega_u, seed=seed, scale=scale)

    def __call__(self, t) -> np.ndarray:
        return self.Bw @ w_eval(t, self.omega_u)


@dataclass
class ScenarioSchedule:
    t_end: float = 10.0
    dt: float = 1.0 / 600.0
    sample_rate: float = 60.0
    wrong_admittance_until: float = 1.0
    attack: object = None
    noise: object = None

    def __post_init__(self):
        ratio = 1.0 / (self.sample_rate * self.dt)
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("dt must divide the sample interval")
        if not 0 <= self.wrong_admittance_until <= self.t_end:
            raise ValueError("wrong_admittance_until must lie in [0, t_end]")

    @property
    def substeps(self) -> int:
        return int(round(1.0 / (self.sample_rate * self.dt)))

    @property
    def n_samples(self) -> int:
        return int(round(self.t_end * self.sample_rate)) + 1

    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) / self.sample_rate


@dataclass
class TruthTrajectory:
    times: np.ndarray
    states: np.ndarray
    clean_measurements: np.ndarray
    delta_max: np.ndarray = field(default=None)


def largest_state_change(traj) -> np.ndarray:
    """Per-state ``max_t |x_i(t) - x_i(0)|``; accepts a trajectory or a state array."""
    states = traj.states if isinstance(traj, TruthTrajectory) else np.asarray(traj)
    if states.shape[0] == 0:
        raise ValueError("empty trajectory")
    return np.max(np.abs(states - states[0]), axis=0)


def _integrate(case, schedule, Y, ui, q_std, rng):
    u0 = case.u0
    times = schedule.times()
    h = 1.0 / schedule.sample_rate / schedule.substeps
    pr = case.params()

    def rhs(x, u, t):
        return f_eval(x, u, Y, pr) + ui(t)

    states = np.empty((times.size, case.n))
    x = case.x0.copy()
    for k, t in enumerate(times):
        states[k] = x
        if k == times.size - 1:
            break
        for j in range(schedule.substeps):
            x = rk4_step(rhs, x, u0, h, t + j * h)
        if q_std is not None:
            x = x + q_std * rng.standard_normal(case.n)
    return times, states


def nominal_pass(case: SystemCase, schedule: ScenarioSchedule, Y=None) -> TruthTrajectory:
    """Noise-free, uncertainty-free run used to size ``Q`` and ``Bw``."""
    Y = case.Y_post if Y is None else Y
    times, states = _integrate(case, schedule, Y, UnknownInputSpec.zero(case.n), None, None)
    traj = TruthTrajectory(times, states, h_eval(states, Y, case))
    traj.delta_max = largest_state_change(traj)
    return traj


def simulate_truth(case: SystemCase, schedule: ScenarioSchedule,
                   ui: UnknownInputSpec, q_seed: int | None,
                   delta_max=None, q_fraction: float = 0.05, Y=None) -> TruthTrajectory:
    """Integrate ``x' = f(x, u0) + Bw w(t)`` and sample the clean PMU outputs.

    ``q_seed=None`` or ``q_fraction=0`` disables process noise. ``delta_max``
    defaults to the nominal pre-pass of the same schedule.
    """
    Y = case.Y_post if Y is None else Y
    if delta_max is None:
        delta_max = nominal_pass(case, schedule, Y).delta_max
    delta_max = np.asarray(delta_max, dtype=float)
    q_std = None
    rng = None
    if q_seed is not None and q_fraction > 0:
        q_std = q_fraction * delta_max
        rng = np.random.default_rng(q_seed)
    times, states = _integrate(case, schedule, Y, ui, q_std, rng)
    return TruthTrajectory(times, states, h_eval(states, Y, case), delta_max)


def process_noise_cov(delta_max, fraction: float = 0.05) -> np.ndarray:
    return np.diag((fraction * np.asarray(delta_max, dtype=float)) ** 2)


def write_trajectory_csv(path, times, states, measurements) -> None:
    n, p = states.shape[1], measurements.shape[1]
    header = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"y_{j + 1}" for j in range(p)]
    with open(Path(path), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for t, x, y in zip(times, states, measurements):
            wr.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in y])


def read_trajectory_csv(path):
    """Returns ``(times, states, measurements)``."""
    with open(Path(path), newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = np.array([[float(v) for v in row] for row in rd])
    n = sum(1 for h in header if h.startswith("x_"))
    return rows[:, 0], rows[:, 1:1 + n], rows[:, 1 + n:]
