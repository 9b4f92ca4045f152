"""Two-axis (4th order) multi-machine generator model.

State layout for an ``m``-machine system (``n = 4m``)::

    x = [delta_1..delta_m, omega_1..omega_m, eq_1..eq_m, ed_1..ed_m]

Inputs (``v = 2m``) are ``[Tm_1..Tm_m, Efd_1..Efd_m]`` and measurements
(``p = 4m``) are the PMU phasor parts ``[eR.., eI.., iR.., iI..]``.

Every evaluation function accepts either a single vector of shape ``(n,)``
or a batch of shape ``(k, n)``; batches are what the sigma-point filters
push through the model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

OMEGA_S = 2.0 * np.pi * 60.0


class ContractError(ValueError):
    """Raised when inputs violate a dimensional or domain contract."""


class NumericError(ArithmeticError):
    """Raised when a model evaluation produces non-finite values."""


@dataclass(frozen=True)
class MachineParams:
    H: float
    D: float
    xd: float
    xq: float
    xdp: float
    xqp: float
    td0p: float
    tq0p: float

    def __post_init__(self):
        if not (self.H > 0 and self.td0p > 0 and self.tq0p > 0):
            raise ContractError("H, T'd0 and T'q0 must be positive")
        if not (self.xd >= self.xdp > 0 and self.xq >= self.xqp > 0):
            raise ContractError("reactances must satisfy x >= x' > 0")
        if self.D < 0:
            raise ContractError("damping must be non-negative")


@dataclass
class SystemCase:
    """Machine data, reduced admittance matrices and the operating point."""

    machines: list[MachineParams]
    Y_pre: np.ndarray
    Y_post: np.ndarray
    omega_s: float = OMEGA_S
    u0: np.ndarray = field(default=None)
    x0: np.ndarray = field(default=None)
    name: str = "case"

    def __post_init__(self):
        m = len(self.machines)
        self.Y_pre = np.asarray(self.Y_pre, dtype=complex)
        self.Y_post = np.asarray(self.Y_post, dtype=complex)
        for Y in (self.Y_pre, self.Y_post):
            if Y.shape != (m, m):
                raise ContractError(f"admittance matrix must be {m}x{m}, got {Y.shape}")
        if self.u0 is not None:
            self.u0 = np.asarray(self.u0, dtype=float)
            if self.u0.shape != (2 * m,):
                raise ContractError("u0 must have length 2m")
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=float)
            if self.x0.shape != (4 * m,):
                raise ContractError("x0 must have length 4m")

    @property
    def m(self) -> int:
        return len(self.machines)

    @property
    def n(self) -> int:
        return 4 * self.m

    @property
    def p(self) -> int:
        return 4 * self.m

    def params(self) -> "_Params":
        return _Params.from_machines(self.machines, self.omega_s)

    def validate(self, tol: float = 1e-6) -> None:
        """Check that ``x0`` is an equilibrium of the pre-fault system."""
        if self.u0 is None or self.x0 is None:
            raise ContractError("case has no operating point")
        if not (np.all(np.isfinite(self.u0)) and np.all(np.isfinite(self.x0))):
            raise ContractError("operating point must be finite")
        res = np.max(np.abs(f_eval(self.x0, self.u0, self.Y_pre, self)))
        if res >= tol:
            raise ContractError(f"x0 is not an equilibrium: residual {res:.3e}")


@dataclass(frozen=True)
class _Params:
    """Machine parameters as per-machine arrays, for vectorized evaluation."""

    H: np.ndarray
    D: np.ndarray
    xd: np.ndarray
    xq: np.ndarray
    xdp: np.ndarray
    xqp: np.ndarray
    td0p: np.ndarray
    tq0p: np.ndarray
    omega_s: float

    @classmethod
    def from_machines(cls, machines, omega_s):
        cols = {k: np.array([getattr(mc, k) for mc in machines], dtype=float)
                for k in ("H", "D", "xd", "xq", "xdp", "xqp", "td0p", "tq0p")}
        return cls(omega_s=float(omega_s), **cols)


def _as_params(model) -> _Params:
    if isinstance(model, _Params):
        return model
    if isinstance(model, SystemCase):
        return model.params()
    raise ContractError(f"expected SystemCase, got {type(model).__name__}")


def _unpack(x, m):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 4 * m:
        raise ContractError(f"state length {x.shape[-1]} != 4m = {4 * m}")
    return x[..., :m], x[..., m:2 * m], x[..., 2 * m:3 * m], x[..., 3 * m:]


def _check_Y(Y, m):
    Y = np.asarray(Y, dtype=complex)
    if Y.shape != (m, m):
        raise ContractError(f"admittance matrix must be {m}x{m}, got {Y.shape}")
    return Y


def ri_to_dq(re, im, delta):
    """Rotate network-frame (R, I) components into the machine (d, q) frame."""
    s, c = np.sin(delta), np.cos(delta)
    return re * s - im * c, re * c + im * s


def dq_to_ri(d, q, delta):
    """Inverse of :func:`ri_to_dq`."""
    s, c = np.sin(delta), np.cos(delta)
    return d * s + q * c, q * s - d * c


def interface_currents(state, Y, m: int | None = None):
    """Terminal currents injected by each machine.

    Returns ``(iR, iI, id, iq)``, each with the batch shape of ``state`` and
    one entry per machine.
    """
    state = np.asarray(state, dtype=float)
    if m is None:
        if state.shape[-1] % 4:
            raise ContractError("state length must be a multiple of 4")
        m = state.shape[-1] // 4
    delta, _, eq, ed = _unpack(state, m)
    Y = _check_Y(Y, m)
    psi_r, psi_i = dq_to_ri(ed, eq, delta)
    current = (psi_r + 1j * psi_i) @ Y.T
    iR, iI = current.real, current.imag
    id_, iq = ri_to_dq(iR, iI, delta)
    return iR, iI, id_, iq


def _raise_nonfinite(arr, what, m):
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = np.argwhere(bad)[0]
        machine = int(idx[-1]) % m
        raise NumericError(f"non-finite {what} at machine {machine}")


def f_eval(state, u, Y, model):
    """Time derivative of the state (rad/s for omega, pu elsewhere)."""
    pr = _as_params(model)
    m = pr.H.size
    delta, omega, eq, ed = _unpack(state, m)
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != 2 * m:
        raise ContractError(f"input length {u.shape[-1]} != 2m = {2 * m}")
    Tm, Efd = u[..., :m], u[..., m:]
    _, _, id_, iq = interface_currents(state, Y, m)
    Te = ed * id_ + eq * iq + (pr.xqp - pr.xdp) * id_ * iq
    ws = pr.omega_s
    d_delta = omega - ws
    d_omega = ws / (2.0 * pr.H) * (Tm - Te - pr.D / ws * (omega - ws))
    d_eq = (Efd - eq - (pr.xd - pr.xdp) * id_) / pr.td0p
    d_ed = (-ed + (pr.xq - pr.xqp) * iq) / pr.tq0p
    out = np.concatenate([d_delta, d_omega, d_eq, d_ed], axis=-1)
    _raise_nonfinite(out, "derivative", m)
    return out


def h_eval(state, Y, model):
    """PMU measurements ``[eR, eI, iR, iI]`` (all machines per block)."""
    pr = _as_params(model)
    m = pr.H.size
    delta, _, eq, ed = _unpack(state, m)
    iR, iI, id_, iq = interface_currents(state, Y, m)
    vq = eq - pr.xdp * id_
    vd = ed + pr.xqp * iq
    eR, eI = dq_to_ri(vd, vq, delta)
    out = np.concatenate([eR, eI, iR, iI], axis=-1)
    _raise_nonfinite(out, "measurement", m)
    return out


@dataclass
class LinearSplit:
    """``f(x, u) = A x + B u + phi(x, u)``."""

    A: np.ndarray
    B: np.ndarray
    phi: Callable


def split_linear(case: SystemCase, Y=None) -> LinearSplit:
    """Separate the linear part of the dynamics from the interconnection terms.

    ``Y`` defaults to the post-fault matrix; ``phi`` closes over it.
    """
    pr = case.params()
    m, n = case.m, case.n
    Y = case.Y_post if Y is None else _check_Y(Y, m)
    ws = pr.omega_s
    A = np.zeros((n, n))
    B = np.zeros((n, 2 * m))
    i = np.arange(m)
    A[i, m + i] = 1.0
    A[m + i, m + i] = -pr.D / (2.0 * pr.H)
    A[2 * m + i, 2 * m + i] = -1.0 / pr.td0p
    A[3 * m + i, 3 * m + i] = -1.0 / pr.tq0p
    B[m + i, i] = ws / (2.0 * pr.H)
    B[2 * m + i, m + i] = 1.0 / pr.td0p

    def phi(x, u=None):
        x = np.asarray(x, dtype=float)
        _, _, id_, iq = interface_currents(x, Y, m)
        eq, ed = x[..., 2 * m:3 * m], x[..., 3 * m:]
        Te = ed * id_ + eq * iq + (pr.xqp - pr.xdp) * id_ * iq
        # damping acts on (omega - ws); its constant part lives here
        return np.concatenate([
            np.broadcast_to(-ws, x[..., :m].shape),
            ws / (2.0 * pr.H) * (-Te) + pr.D / (2.0 * pr.H) * ws,
            -(pr.xd - pr.xdp) * id_ / pr.td0p,
            (pr.xq - pr.xqp) * iq / pr.tq0p,
        ], axis=-1)

    return LinearSplit(A=A, B=B, phi=phi)


def fd_jacobian(func: Callable, x, step_scale: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of a batch-capable ``func``.

    The ``2n`` perturbed points are evaluated in one batched call.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    steps = step_scale * np.maximum(1.0, np.abs(x))
    pts = np.repeat(x[None, :], 2 * n, axis=0)
    idx = np.arange(n)
    pts[idx, idx] += steps
    pts[n + idx, idx] -= steps
    vals = np.asarray(func(pts))
    J = ((vals[:n] - vals[n:]) / (2.0 * steps[:, None])).T
    if not np.all(np.isfinite(J)):
        raise NumericError("non-finite Jacobian entry")
    return J


def richardson_jacobian(func: Callable, x, step_scale: float = 1e-3) -> np.ndarray:
    """Central differences at ``h`` and ``h/2`` combined as ``(4 J(h/2) - J(h)) / 3``.

    Fourth-order accurate, so a much larger step can be used than with
    :func:`fd_jacobian` and round-off drops accordingly.
    """
    J1 = fd_jacobian(func, x, step_scale)
    J2 = fd_jacobian(func, x, 0.5 * step_scale)
    return (4.0 * J2 - J1) / 3.0


def jacobian_f(state, u, Y, model, step_scale: float = 1e-6) -> np.ndarray:
    pr = _as_params(model)
    return fd_jacobian(lambda z: f_eval(z, u, Y, pr), state, step_scale)


def jacobian_h(state, Y, model, step_scale: float = 1e-6) -> np.ndarray:
    pr = _as_params(model)
    return fd_jacobian(lambda z: h_eval(z, Y, pr), state, step_scale)


# --- case files -------------------------------------------------------------

def _y_to_json(Y):
    return [[[float(z.real), float(z.imag)] for z in row] for row in Y]


def _y_from_json(rows):
    return np.array([[complex(re, im) for re, im in row] for row in rows])


def case_to_dict(case: SystemCase) -> dict:
    return {
        "name": case.name,
        "machines": [
            {"h": mc.H, "d": mc.D, "xd": mc.xd, "xq": mc.xq, "xdp": mc.xdp,
             "xqp": mc.xqp, "td0p": mc.td0p, "tq0p": mc.tq0p}
            for mc in case.machines
        ],
        "y_pre": _y_to_json(case.Y_pre),
        "y_post": _y_to_json(case.Y_post),
        "omega_s": case.omega_s,
        "u0": [float(v) for v in case.u0],
        "x0": [float(v) for v in case.x0],
    }


def case_from_dict(doc: dict) -> SystemCase:
    try:
        machines = [
            MachineParams(H=mc["h"], D=mc["d"], xd=mc["xd"], xq=mc["xq"],
                          xdp=mc["xdp"], xqp=mc["xqp"], td0p=mc["td0p"],
                          tq0p=mc["tq0p"])
            for mc in doc["machines"]
        ]
        case = SystemCase(
            machines=machines,
            Y_pre=_y_from_json(doc["y_pre"]),
            Y_post=_y_from_json(doc["y_post"]),
            omega_s=float(doc.get("omega_s", OMEGA_S)),
            u0=np.array(doc["u0"], dtype=float),
            x0=np.array(doc["x0"], dtype=float),
            name=doc.get("name", "case"),
        )
    except KeyError as exc:
        raise ContractError(f"case file missing field {exc}") from None
    case.validate()
    return case


def load_case(path) -> SystemCase:
    return case_from_dict(json.loads(Path(path).read_text()))


def save_case(case: SystemCase, path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=2) + "\n")
