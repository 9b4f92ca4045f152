"""End-to-end scenario: truth, corrupted PMU stream, all estimators, metrics.

Everything here works on in-memory arrays; file output lives in
:mod:`powerdse.report` and argument handling in :mod:`powerdse.cli`.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import detect_metrics as dm
from .filters import (FilterConfig, NumericalInstability, PowerSystemModel,
                      SingularUpdate, ckf_step, ekf_step, initial_belief, srukf_step,
                      to_sqrt, ukf_step, chol_lower)
from .noise_attacks import AttackSpec, NoiseSpec, corrupt_measurements
from .observer import (LipschitzConstants, ObserverGain, RegionOfInterest, estimate_mu_phi,
                       estimate_rho, observer_step, solve_observer_lmi)
from .powermodel import SystemCase, h_eval, jacobian_h, split_linear
from .sim import (ScenarioSchedule, SimulationError, UnknownInputSpec, nominal_pass,
                  process_noise_cov, simulate_truth)

log = logging.getLogger(__name__)

ESTIMATORS = ("ekf", "ukf", "srukf", "ckf", "observer")
SCENARIOS = ("nominal", "integrity", "dos", "replay")
SEED_NAMES = ("process", "measurement", "bw", "sampling")
DEFAULT_CONSTANTS = LipschitzConstants(10.0, 1.0, 1.0)

_DIVERGENCE = (NumericalInstability, SingularUpdate, SimulationError, FloatingPointError,
               np.linalg.LinAlgError, dm.UndefinedRatio)


def derive_seeds(base: int) -> dict:
    """Independent per-stream seeds from one integer."""
    ss = np.random.SeedSequence(int(base))
    return {name: int(child.generate_state(1)[0])
            for name, child in zip(SEED_NAMES, ss.spawn(len(SEED_NAMES)))}


@dataclass
class ScenarioSetup:
    case: SystemCase
    scenario: str = "nominal"
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    estimators: tuple = ESTIMATORS
    seeds: dict = field(default_factory=lambda: derive_seeds(0))
    t_end: float = 10.0
    threshold: float = 3.0
    warmup: float = 2.0
    p0: float = 0.1
    r_std: float = 0.01
    mean_from: float | None = None  # default: second half of the horizon
    gain: ObserverGain | None = None
    constants: LipschitzConstants = field(default_factory=lambda: DEFAULT_CONSTANTS)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        self.estimators = tuple(self.estimators)
        if not self.estimators:
            raise ValueError("estimator list is empty")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ValueError(f"unknown estimators {bad}")
        missing = [k for k in SEED_NAMES if k not in self.seeds]
        if missing:
            raise ValueError(f"missing seeds {missing}")

    def attack(self) -> AttackSpec:
        kind = "none" if self.scenario == "nominal" else self.scenario
        return AttackSpec.default(kind, self.case.m, self.t_end)


@dataclass
class EstimatorRun:
    name: str
    means: np.ndarray
    innovations: np.ndarray
    ratios: np.ndarray
    wall_time: float
    steps: int
    diverged_at: float | None = None


@dataclass
class ScenarioResult:
    setup: ScenarioSetup
    times: np.ndarray
    truth: np.ndarray
    measured: np.ndarray
    attack: AttackSpec
    runs: dict
    metrics: dict
    flags: dict
    gain: ObserverGain | None = None


def synthesize_gain(case: SystemCase, constants: LipschitzConstants) -> ObserverGain:
    """Gain for the estimator-side split, linearized output at ``x0`` with ``Y_post``."""
    split = split_linear(case)
    C = jacobian_h(case.x0, case.Y_post, case)
    return solve_observer_lmi(split.A, C, constants)


_STEPS = {"ekf": ekf_step, "ukf": ukf_step, "ckf": ckf_step}


def run_filter(name, case, times, ys, Q, R, p0=0.1, wrong_until=1.0) -> EstimatorRun:
    """Run one Kalman-type filter over the stream; rows are posteriors at ``times``."""
    dt = times[1] - times[0]
    model = PowerSystemModel(case, dt=dt, wrong_until=wrong_until)
    cfg = FilterConfig(Q=Q, R=R)
    T, n, p = times.size, case.n, ys.shape[1]
    means = np.full((T, n), np.nan)
    innov = np.full((T, p), np.nan)
    ratios = np.full((T, p), np.nan)
    belief = initial_belief(case, p0)
    means[0] = belief.mean
    innov[0] = ys[0] - h_eval(belief.mean, model.Y_at(times[0]), case)
    if name == "srukf":
        belief = to_sqrt(belief)
        sq, sr = chol_lower(Q), chol_lower(R)

        def step(b, y, t0, t1):
            return srukf_step(b, case.u0, y, model, cfg, t0, t1, sqrt_Q=sq, sqrt_R=sr)
    else:
        fn = _STEPS[name]

        def step(b, y, t0, t1):
            return fn(b, case.u0, y, model, cfg, t0, t1)

    diverged = None
    start = time.perf_counter()
    done = 0
    with np.errstate(over="raise", invalid="raise"):
        for k in range(1, T):
            try:
                belief, info = step(belief, ys[k], times[k - 1], times[k])
                if not np.all(np.isfinite(belief.mean)):
                    raise NumericalInstability("non-finite mean")
                ratio = dm.innovation_ratio(ys[k], info.y_pred, info.pyy_diag)
            except _DIVERGENCE as exc:
                diverged = float(times[k])
                log.warning("%s diverged at t = %.4f s: %s", name, diverged, exc)
                break
            means[k] = belief.mean
            innov[k] = info.innovation
            ratios[k] = ratio
            done += 1
    wall = time.perf_counter() - start
    return EstimatorRun(name, means, innov, ratios, wall, done, diverged)


def run_observer(case, times, ys, gain: ObserverGain, r_std=0.01,
                 wrong_until=1.0, substeps: int = 10) -> EstimatorRun:
    """Observer with ``y`` held over each interval; ratios use the nominal noise std."""
    dt = times[1] - times[0]
    pre = split_linear(case, case.Y_pre)
    post = split_linear(case, case.Y_post)
    pr = case.params()

    def pick(t):
        return (pre, case.Y_pre) if t < wrong_until - 1e-9 else (post, case.Y_post)

    T, n, p = times.size, case.n, ys.shape[1]
    means = np.full((T, n), np.nan)
    innov = np.full((T, p), np.nan)
    xhat = initial_belief(case).mean
    means[0] = xhat
    innov[0] = dm.observer_innovation(ys[0], xhat, pick(times[0])[1], pr)
    diverged = None
    done = 0
    start = time.perf_counter()
    with np.errstate(over="raise", invalid="raise"):
        for k in range(1, T):
            split, Y = pick(times[k - 1])
            try:
                xhat = observer_step(xhat, case.u0, ys[k - 1], gain.L, split,
                                     lambda z, Y=Y: h_eval(z, Y, pr), dt, substeps)
                innov[k] = dm.observer_innovation(ys[k], xhat, pick(times[k])[1], pr)
            except _DIVERGENCE as exc:
                diverged = float(times[k])
                log.warning("observer diverged at t = %.4f s: %s", diverged, exc)
                break
            means[k] = xhat
            done += 1
    wall = time.perf_counter() - start
    return EstimatorRun("observer", means, innov, innov / r_std, wall, done, diverged)


def run_scenario(setup: ScenarioSetup) -> ScenarioResult:
    case = setup.case
    sched = ScenarioSchedule(t_end=setup.t_end)
    nominal = nominal_pass(case, sched)
    ui = UnknownInputSpec.random(nominal.delta_max, setup.seeds["bw"])
    truth = simulate_truth(case, sched, ui, setup.seeds["process"], nominal.delta_max)
    attack = setup.attack()
    times = truth.times
    _, measured = corrupt_measurements(times, truth.clean_measurements, attack, setup.noise,
                                       setup.seeds["measurement"])
    Q = process_noise_cov(nominal.delta_max)
    R = setup.r_std ** 2 * np.eye(measured.shape[1])

    gain = setup.gain
    runs = {}
    for name in setup.estimators:
        if name == "observer":
            if gain is None:
                gain = synthesize_gain(case, setup.constants)
            runs[name] = run_observer(case, times, measured, gain, setup.r_std,
                                      sched.wrong_admittance_until)
        else:
            runs[name] = run_filter(name, case, times, measured, Q, R, setup.p0,
                                    sched.wrong_admittance_until)

    metrics, flags = {}, {}
    window = attack.window if attack.kind != "none" else (0.0, np.inf)
    for name, run in runs.items():
        err, excluded = dm.rel_error_norm(truth.states, run.means, return_excluded=True)
        f, det, fa = dm.flag_compromised(times, np.nan_to_num(run.ratios, nan=0.0),
                                         attack.channels, setup.threshold, setup.warmup,
                                         window)
        flags[name] = f
        mean_from = 0.5 * setup.t_end if setup.mean_from is None else setup.mean_from
        metrics[name] = dm.summarize(err, times, det, fa, run.wall_time, excluded, mean_from)
    return ScenarioResult(setup, times, truth.states, measured, attack, runs, metrics,
                          flags, gain)


def default_region(case: SystemCase, n_samples: int = 1000) -> RegionOfInterest:
    """Box around ``x0``: angles +-0.5 rad, speeds +-1 rad/s, EMFs +-0.2 pu."""
    m = case.m
    half = np.concatenate([np.full(m, 0.5), np.full(m, 1.0), np.full(2 * m, 0.2)])
    return RegionOfInterest(case.x0 - half, case.x0 + half, n_samples)


def estimate_constants(case: SystemCase, seed, n_samples: int = 1000,
                       n_pairs: int = 2000) -> LipschitzConstants:
    """Sampled ``rho`` and ``(mu, varphi)`` of the interconnection term on :func:`default_region`."""
    region = default_region(case, n_samples)
    phi = split_linear(case).phi
    ss = np.random.SeedSequence(seed)
    s_rho, s_pairs = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    rho = estimate_rho(phi, region, s_rho)
    mu, varphi = estimate_mu_phi(phi, region, s_pairs, n_pairs)
    return LipschitzConstants(float(rho), mu, varphi)
