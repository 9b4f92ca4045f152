"""Construction of the shipped 3-machine case.

The network is the familiar 9-bus, 3-generator test system with loads
modelled as constant admittances at nominal voltage. Generator internal
nodes sit behind their d-axis transient reactances and the network is
Kron-reduced onto those nodes.

The operating point is not taken from a power flow: rotor angles and q-axis
EMFs are design inputs, ``ed`` is found by Newton iteration so that the
d-axis EMF is stationary, and ``u0`` is then chosen to balance the rest.

Without governors a post-fault power mismatch shows up as a permanent
frequency drift. After tripping line 5-7, a shunt is therefore added at each
internal node so that the post-fault system has an equilibrium with the same
EMFs and speeds as the pre-fault one, only with rotor angles advanced by
``POST_FAULT_SHIFT``. The swing between the two is the transient the
estimators have to follow.
"""
from __future__ import annotations

from importlib import resources

import numpy as np
from scipy.optimize import fsolve

from .powermodel import (
    OMEGA_S,
    MachineParams,
    SystemCase,
    dq_to_ri,
    interface_currents,
    load_case,
)


# (from, to, R, X, B_total)
LINES_9BUS = [
    (1, 4, 0.0, 0.0576, 0.0),
    (4, 5, 0.010, 0.085, 0.176),
    (4, 6, 0.017, 0.092, 0.158),
    (5, 7, 0.032, 0.161, 0.306),
    (6, 9, 0.039, 0.170, 0.358),
    (7, 8, 0.0085, 0.072, 0.149),
    (8, 9, 0.0119, 0.1008, 0.209),
    (2, 7, 0.0, 0.0625, 0.0),
    (3, 9, 0.0, 0.0586, 0.0),
]
LOADS_9BUS = {5: 1.25 + 0.5j, 6: 0.9 + 0.3j, 8: 1.0 + 0.35j}

MACHINES_3 = [
    MachineParams(H=23.64, D=59.1, xd=0.146, xq=0.0969 * 1.5, xdp=0.0608,
                  xqp=0.0969, td0p=8.96, tq0p=0.31),
    MachineParams(H=6.40, D=16.0, xd=0.8958, xq=0.8645, xdp=0.1198,
                  xqp=0.1969, td0p=6.00, tq0p=0.535),
    MachineParams(H=3.01, D=7.525, xd=1.3125, xq=1.2578, xdp=0.1813,
                  xqp=0.25, td0p=5.89, tq0p=0.60),
]

# internal rotor angles (rad) and q-axis EMFs (pu) of the design point
DESIGN_DELTA = np.array([0.55, 0.95, 0.85])
DESIGN_EQ = np.array([1.05, 0.95, 0.90])
POST_FAULT_SHIFT = np.array([0.0, 0.20, 0.12])


def reduced_admittance(machines, lines=LINES_9BUS, loads=LOADS_9BUS,
                       drop=()) -> np.ndarray:
    """Kron-reduce the network onto generator internal nodes."""
    m = len(machines)
    nbus = 1 + max(max(a, b) for a, b, *_ in lines)
    size = m + nbus - 1
    Y = np.zeros((size, size), dtype=complex)

    def node(bus):
        return m + bus - 1

    def add_branch(i, j, y, bsh=0.0):
        Y[i, i] += y + 1j * bsh / 2
        Y[j, j] += y + 1j * bsh / 2
        Y[i, j] -= y
        Y[j, i] -= y

    for a, b, r, x, bsh in lines:
        if (a, b) in drop or (b, a) in drop:
            continue
        add_branch(node(a), node(b), 1.0 / complex(r, x), bsh)
    for bus, s in loads.items():
        Y[node(bus), node(bus)] += np.conj(s)
    for k, mc in enumerate(machines):
        add_branch(k, node(k + 1), 1.0 / complex(0.0, mc.xdp))
    Ygg, Ygb = Y[:m, :m], Y[:m, m:]
    Ybg, Ybb = Y[m:, :m], Y[m:, m:]
    return Ygg - Ygb @ np.linalg.solve(Ybb, Ybg)


def equilibrium(machines, Y, delta, eq, omega_s=OMEGA_S):
    """Solve for ``ed`` and steady inputs making ``(delta, omega_s, eq, ed)`` stationary."""
    m = len(machines)
    xq = np.array([mc.xq for mc in machines])
    xqp = np.array([mc.xqp for mc in machines])
    xd = np.array([mc.xd for mc in machines])
    xdp = np.array([mc.xdp for mc in machines])

    def state(ed):
        return np.concatenate([delta, np.full(m, omega_s), eq, ed])

    def resid(ed):
        _, _, _, iq = interface_currents(state(ed), Y, m)
        return ed - (xq - xqp) * iq

    ed = fsolve(resid, np.zeros(m), xtol=1e-14)
    x0 = state(ed)
    _, _, id_, iq = interface_currents(x0, Y, m)
    Te = ed * id_ + eq * iq + (xqp - xdp) * id_ * iq
    Efd = eq + (xd - xdp) * id_
    u0 = np.concatenate([Te, Efd])
    return x0, u0


def internal_emf(x, m):
    """Complex internal EMF phasor of each machine."""
    re, im = dq_to_ri(x[3 * m:], x[2 * m:3 * m], x[:m])
    return re + 1j * im


def post_fault_admittance(machines, Y_pre, x0, shift, drop=((5, 7),)):
    """Reduced admittance after tripping ``drop``, with internal-node shunts.

    The shunts make ``x0`` with angles advanced by ``shift`` an equilibrium:
    every machine then sees the same d/q currents as before the fault.
    Returns ``(Y_post, x_post)``.
    """
    m = len(machines)
    Y_out = reduced_admittance(machines, drop=list(drop))
    x_post = np.array(x0, dtype=float)
    x_post[:m] += shift
    target = (Y_pre @ internal_emf(x0, m)) * np.exp(1j * np.asarray(shift))
    E_post = internal_emf(x_post, m)
    shunt = (target - Y_out @ E_post) / E_post
    return Y_out + np.diag(shunt), x_post


def build_three_machine_case() -> SystemCase:
    Y_pre = reduced_admittance(MACHINES_3)
    x0, u0 = equilibrium(MACHINES_3, Y_pre, DESIGN_DELTA, DESIGN_EQ)
    Y_post, _ = post_fault_admittance(MACHINES_3, Y_pre, x0, POST_FAULT_SHIFT)
    case = SystemCase(machines=list(MACHINES_3), Y_pre=Y_pre, Y_post=Y_post,
                      omega_s=OMEGA_S, u0=u0, x0=x0, name="three_machine")
    case.validate(tol=1e-9)
    return case


def shipped_case_path():
    return resources.files("powerdse") / "data" / "three_machine.json"


def load_shipped_case() -> SystemCase:
    with resources.as_file(shipped_case_path()) as path:
        return load_case(path)
