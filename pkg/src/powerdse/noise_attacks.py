"""Measurement noise generators and attacks on the PMU stream.

Pipeline order is truth -> attack -> noise: attacks act on the clean
measurements and fresh noise is added to whatever the attacker forwards.
Channel indices are 0-based.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NOISE_KINDS = ("gaussian", "laplace", "cauchy")
ATTACK_KINDS = ("none", "integrity", "dos", "replay")


def gaussian_noise(p, std: float, seed=None) -> np.ndarray:
    """i.i.d. ``N(0, std**2)`` samples of shape ``p``."""
    if std < 0:
        raise ValueError("std must be non-negative")
    return std * np.random.default_rng(seed).standard_normal(p)


def laplace_noise(m, s, u1):
    """Inverse-CDF Laplace sample for ``u1`` in ``(-0.5, 0.5]``."""
    u1 = np.asarray(u1, dtype=float)
    mag = np.minimum(np.abs(u1), 0.5 - 1e-15)
    return m - s * np.sign(u1) * np.log1p(-2.0 * mag)


def cauchy_noise(a, b, u2):
    """Inverse-CDF Cauchy sample for ``u2`` in ``(0, 1)``."""
    return a + b * np.tan(np.pi * (np.asarray(u2, dtype=float) - 0.5))


def _open_uniform(rng, shape):
    u = rng.random(shape)
    while np.any(u == 0.0):
        bad = u == 0.0
        u[bad] = rng.random(int(bad.sum()))
    return u


@dataclass
class NoiseSpec:
    kind: str = "gaussian"
    std: float = 0.01
    m: float = 0.0
    s: float = 0.02
    a: float = 0.0
    b: float = 1e-4
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not (self.std > 0 and self.s > 0 and self.b > 0):
            raise ValueError("noise scales must be positive")

    def sample(self, shape, seed=None) -> np.ndarray:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        if self.kind == "gaussian":
            return self.std * rng.standard_normal(shape)
        if self.kind == "laplace":
            # 0.5 - U maps [0, 1) onto (-0.5, 0.5]
            return laplace_noise(self.m, self.s, 0.5 - rng.random(shape))
        return cauchy_noise(self.a, self.b, _open_uniform(rng, shape))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "std": self.std, "m": self.m, "s": self.s,
                "a": self.a, "b": self.b, "seed": self.seed}


@dataclass
class AttackSpec:
    kind: str = "none"
    channels: list[int] = field(default_factory=list)
    factors: list[float] | None = None
    window: tuple[float, float] = (0.0, math.inf)
    replay_shift: float = 3.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        self.channels = [int(c) for c in self.channels]
        self.window = (float(self.window[0]), float(self.window[1]))
        if self.window[0] > self.window[1] or self.window[0] < 0:
            raise ValueError("attack window must satisfy 0 <= start <= end")
        if self.kind == "integrity":
            if self.factors is None or len(self.factors) != len(self.channels):
                raise ValueError("integrity attack needs one factor per channel")
        if self.kind == "replay" and self.replay_shift > self.window[0]:
            raise ValueError("replay_shift must not exceed the window start")

    @classmethod
    def default(cls, kind: str, m: int, t_end: float = 10.0) -> "AttackSpec":
        """Attack on all eR channels with the standard windows.

        Integrity scales the first ``ceil(m/2)`` eR channels by 0.6 and the
        rest by 1/0.6 over the whole run; DoS and replay act on [3 s, 6 s].
        """
        channels = list(range(m))
        if kind == "none":
            return cls("none")
        if kind == "integrity":
            k = math.ceil(m / 2)
            return cls("integrity", channels, [0.6] * k + [1 / 0.6] * (m - k), (0.0, t_end))
        if kind in ("dos", "replay"):
            return cls(kind, channels, window=(3.0, 6.0), replay_shift=3.0)
        raise ValueError(f"unknown attack kind {kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "channels": list(self.channels),
                "factors": None if self.factors is None else list(self.factors),
                "window": [self.window[0], self.window[1] if math.isfinite(self.window[1]) else None],
                "replay_shift": self.replay_shift}

    @classmethod
    def from_dict(cls, doc: dict) -> "AttackSpec":
        window = doc.get("window") or [0.0, None]
        end = math.inf if window[1] is None else window[1]
        return cls(doc.get("kind", "none"), doc.get("channels", []), doc.get("factors"),
                   (window[0], end), doc.get("replay_shift", 3.0))


def apply_attack(times, stream, spec: AttackSpec) -> np.ndarray:
    """Return an attacked copy of ``stream`` (shape ``(T, p)``) sampled at ``times``."""
    stream = np.asarray(stream, dtype=float)
    out = stream.copy()
    if spec.kind == "none" or not spec.channels:
        return out
    times = np.asarray(times, dtype=float)
    if max(spec.channels) >= stream.shape[1] or min(spec.channels) < 0:
        raise ValueError("attack channel out of range")
    dt = times[1] - times[0]
    tol = 1e-9 * max(1.0, abs(dt))
    in_win = (times >= spec.window[0] - tol) & (times <= spec.window[1] + tol)
    rows = np.flatnonzero(in_win)
    if rows.size == 0:
        return out
    ch = np.asarray(spec.channels)
    if spec.kind == "integrity":
        out[np.ix_(rows, ch)] = stream[np.ix_(rows, ch)] * np.asarray(spec.factors)
    elif spec.kind == "dos":
        out[np.ix_(rows, ch)] = stream[rows[0], ch]
    elif spec.kind == "replay":
        lag = int(round(spec.replay_shift / dt))
        src = rows - lag
        if src.min() < 0:
            raise ValueError("replay reaches before the start of the stream")
        out[np.ix_(rows, ch)] = stream[np.ix_(src, ch)]
    return out


def corrupt_measurements(times, clean, attack: AttackSpec, noise: NoiseSpec, seed=None):
    """Attack then add noise; returns ``(attacked_clean, measured)``."""
    attacked = apply_attack(times, clean, attack)
    return attacked, attacked + noise.sample(attacked.shape, seed)
