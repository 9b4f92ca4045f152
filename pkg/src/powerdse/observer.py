"""One-sided Lipschitz nonlinear observer.

Offline: estimate the one-sided Lipschitz constant ``rho`` and the quadratic
inner-boundedness pair ``(mu, varphi)`` of the interconnection term by
sampling a box, then search for ``P, eps1, eps2, sigma`` making the observer
LMI negative definite. The gain is ``L = sigma/2 * P^-1 C^T``.

Online: integrate ``x' = A x + B u + phi(x) + L (y - h(x))`` over each
sample interval with ``y`` held constant.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .lmi import AffineBlock, barrier_minimize
from .powermodel import richardson_jacobian
from .sim import rk4_step

log = logging.getLogger(__name__)


class EstimationError(RuntimeError):
    """Constant estimation produced no usable result."""


class InfeasibleLMI(RuntimeError):
    """The LMI search ended without a negative-definite certificate."""

    def __init__(self, msg, best_max_eig):
        super().__init__(msg)
        self.best_max_eig = best_max_eig


@dataclass
class RegionOfInterest:
    lower: np.ndarray
    upper: np.ndarray
    n_samples: int = 1000

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or np.any(self.lower >= self.upper):
            raise ValueError("region needs lower < upper componentwise")
        if self.n_samples < 2:
            raise ValueError("need at least two samples")

    def sample(self, k: int, rng) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random((k, self.lower.size))


@dataclass
class LipschitzConstants:
    rho: float
    mu: float
    varphi: float


@dataclass
class ObserverGain:
    L: np.ndarray
    P: np.ndarray
    eps1: float
    eps2: float
    sigma: float
    lmi_max_eig: float
    constants: LipschitzConstants = field(default=None)
    C: np.ndarray | None = None

    def to_dict(self) -> dict:
        c = self.constants
        return {
            "L": self.L.tolist(), "P": self.P.tolist(),
            "eps1": self.eps1, "eps2": self.eps2, "sigma": self.sigma,
            "lmi_max_eig": self.lmi_max_eig,
            "constants": None if c is None else {"rho": c.rho, "mu": c.mu, "varphi": c.varphi},
            "C": None if self.C is None else self.C.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ObserverGain":
        c = doc.get("constants")
        return cls(
            L=np.array(doc["L"], dtype=float), P=np.array(doc["P"], dtype=float),
            eps1=float(doc["eps1"]), eps2=float(doc["eps2"]), sigma=float(doc["sigma"]),
            lmi_max_eig=float(doc["lmi_max_eig"]),
            constants=None if c is None else LipschitzConstants(c["rho"], c["mu"], c["varphi"]),
            C=None if doc.get("C") is None else np.array(doc["C"], dtype=float),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ObserverGain":
        return cls.from_dict(json.loads(Path(path).read_text()))


def log_norm(H) -> float:
    """Logarithmic 2-norm: largest eigenvalue of the symmetric part."""
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("log_norm needs a square matrix")
    return float(np.linalg.eigvalsh(0.5 * (H + H.T))[-1])


def estimate_rho(phi: Callable, region: RegionOfInterest, seed=None,
                 samples: np.ndarray | None = None, return_trace: bool = False):
    """Sampled one-sided Lipschitz constant (running max of ``log_norm(J)``).

    ``J`` is a fourth-order finite-difference Jacobian, exact up to round-off
    for linear ``phi``.

    ``phi`` maps a batch ``(k, n)`` to ``(k, n)``. ``samples`` overrides the
    random draw from ``region``.
    """
    rng = np.random.default_rng(seed)
    if samples is None:
        samples = region.sample(region.n_samples, rng)
    rho = -np.inf
    trace = np.empty(len(samples))
    used = 0
    for i, x in enumerate(np.atleast_2d(samples)):
        try:
            J = richardson_jacobian(phi, x)
        except ArithmeticError:
            warnings.warn(f"skipping sample {i}: non-finite Jacobian", RuntimeWarning)
            trace[i] = rho
            continue
        rho = max(rho, log_norm(J))
        trace[i] = rho
        used += 1
    if used == 0:
        raise EstimationError("no sample produced a finite Jacobian")
    return (rho, trace) if return_trace else rho


def inner_bound_holds(dphi, dx, mu, varphi, tol: float = 1e-12) -> np.ndarray:
    """Check ``|dphi|^2 <= mu |dx|^2 + varphi <dphi, dx>`` row-wise."""
    lhs = np.einsum("ij,ij->i", dphi, dphi)
    rhs = mu * np.einsum("ij,ij->i", dx, dx) + varphi * np.einsum("ij,ij->i", dphi, dx)
    return lhs <= rhs + tol * np.maximum(1.0, np.abs(lhs))


def sample_pairs(phi, region: RegionOfInterest, n_pairs: int, rng):
    xi = region.sample(n_pairs, rng)
    xj = region.sample(n_pairs, rng)
    return np.asarray(phi(xi)) - np.asarray(phi(xj)), xi - xj


def default_mu_grid():
    return np.concatenate([[0.0], np.logspace(-6, 6, 241)])


def default_varphi_grid():
    mag = np.logspace(-3, 3, 61)
    return np.concatenate([[0.0], mag, -mag])


def estimate_mu_phi(phi: Callable, region: RegionOfInterest, seed=None,
                    n_pairs: int = 2000, mu_grid=None, varphi_grid=None):
    """Smallest grid pair ``(mu, varphi)`` satisfying the inner bound on all sampled pairs.

    The search is lexicographic: ``mu`` ascending first, then ``varphi`` by
    increasing magnitude (positive before negative on ties).
    """
    rng = np.random.default_rng(seed)
    dphi, dx = sample_pairs(phi, region, n_pairs, rng)
    mu_grid = np.sort(default_mu_grid() if mu_grid is None else np.asarray(mu_grid))
    vg = default_varphi_grid() if varphi_grid is None else np.asarray(varphi_grid)
    vg = np.array(sorted(vg, key=lambda v: (abs(v), -v)))
    a = np.einsum("ij,ij->i", dphi, dphi)
    b = np.einsum("ij,ij->i", dx, dx)
    c = np.einsum("ij,ij->i", dphi, dx)
    tol = 1e-12 * np.maximum(1.0, np.abs(a))
    for mu in mu_grid:
        ok = a[None, :] <= mu * b[None, :] + vg[:, None] * c[None, :] + tol
        hit = np.flatnonzero(ok.all(axis=1))
        if hit.size:
            return float(mu), float(vg[hit[0]])
    raise EstimationError(
        f"no feasible (mu, varphi) on grid mu in [{mu_grid[0]:g}, {mu_grid[-1]:g}], "
        f"varphi in [{vg.min():g}, {vg.max():g}]")


def assemble_lmi(A, C, consts: LipschitzConstants, eps1, eps2, sigma, P) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = A.shape[0]
    I = np.eye(n)
    top = A.T @ P + P @ A + (eps1 * consts.rho + eps2 * consts.mu) * I - sigma * C.T @ C
    off = P + 0.5 * (consts.varphi * eps2 - eps1) * I
    M = np.block([[top, off], [off.T, -eps2 * I]])
    return 0.5 * (M + M.T)


def observer_gain(P, C, sigma) -> np.ndarray:
    return 0.5 * sigma * np.linalg.solve(P, np.atleast_2d(C).T)


def _sym_basis(n):
    """Basis of symmetric ``n x n`` matrices, one per upper-triangle entry."""
    iu, ju = np.triu_indices(n)
    E = np.zeros((iu.size, n, n))
    E[np.arange(iu.size), iu, ju] = 1.0
    E[np.arange(iu.size), ju, iu] = 1.0
    return E, iu, ju


def _lmi_pieces(A, C, consts):
    """``M`` as a linear map: one matrix per decision variable (P basis, eps1, eps2, sigma)."""
    n = A.shape[0]
    E, iu, ju = _sym_basis(n)
    Z = np.zeros((n, n))
    I = np.eye(n)
    MP = np.stack([np.block([[A.T @ e + e @ A, e], [e, Z]]) for e in E])
    M1 = np.block([[consts.rho * I, -0.5 * I], [-0.5 * I, Z]])
    M2 = np.block([[consts.mu * I, 0.5 * consts.varphi * I], [0.5 * consts.varphi * I, -I]])
    M3 = np.block([[-C.T @ C, Z], [Z, Z]])
    return np.concatenate([MP, M1[None], M2[None], M3[None]]), E, (iu, ju)


def solve_observer_lmi(A, C, consts: LipschitzConstants, feas_tol: float = 1e-8,
                       p_floor: float = 1e-6, scalar_floor: float = 1e-9,
                       scalar_cap: float = 1e6, minimize_sigma: bool = True) -> ObserverGain:
    """Find ``P > 0`` and ``eps1, eps2, sigma > 0`` with ``lambda_max(LMI) <= -feas_tol``.

    ``trace(P) = n`` fixes the scale of the homogeneous problem and the
    scalars are boxed to ``[scalar_floor, scalar_cap]``. Phase one minimizes
    ``lambda_max`` of the LMI block along a log-barrier path until it drops
    below ``-feas_tol``. Phase two (``minimize_sigma``) then minimizes
    ``sigma`` subject to the same margin, which yields the smallest gain
    the certificate allows; large ``sigma`` makes the observer stiff.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    pieces, E, (iu, ju) = _lmi_pieces(A, C, consts)
    nP = E.shape[0]
    d = nP + 3
    I2 = np.eye(2 * n)

    def unpack(x):
        P = np.zeros((n, n))
        P[iu, ju] = x[:nP]
        P[ju, iu] = x[:nP]
        return P, x[nP], x[nP + 1], x[nP + 2]

    def lam_max(x):
        P, e1, e2, sg = unpack(x)
        return float(np.linalg.eigvalsh(assemble_lmi(A, C, consts, e1, e2, sg, P))[-1])

    def side_blocks(extra):
        pad = np.zeros((extra, n, n))
        P_blk = AffineBlock(-p_floor * np.eye(n), np.concatenate([E, np.zeros((3, n, n)), pad]))
        lo = np.zeros((d + extra, 3, 3))
        hi = np.zeros((d + extra, 3, 3))
        for k in range(3):
            lo[nP + k, k, k] = 1.0
            hi[nP + k, k, k] = -1.0
        return [P_blk,
                AffineBlock(-scalar_floor * np.eye(3), lo),
                AffineBlock(scalar_cap * np.eye(3), hi)]

    trace_row = np.zeros(d)
    trace_row[np.flatnonzero(iu == ju)] = 1.0

    x0 = np.zeros(d)
    x0[np.flatnonzero(iu == ju)] = 1.0
    x0[nP:] = 1.0
    # phase one: variables (x, t), block t I - M(x) >= 0
    t0 = lam_max(x0) + 1.0
    blk1 = AffineBlock(np.zeros((2 * n, 2 * n)),
                       np.concatenate([-pieces, I2[None]]))
    c1 = np.zeros(d + 1)
    c1[-1] = 1.0
    a1 = np.concatenate([trace_row, [0.0]])
    z = barrier_minimize(c1, [blk1] + side_blocks(1), np.concatenate([x0, [t0]]),
                         a=a1, stop=lambda z: lam_max(z[:d]) < -2.0 * feas_tol)
    x = z[:d]
    best = lam_max(x)
    if not best < -feas_tol:
        raise InfeasibleLMI(f"LMI search ended with lambda_max = {best:.3e} (> {-feas_tol:.1e})",
                            best)
    if minimize_sigma:
        blk2 = AffineBlock(-feas_tol * I2, -pieces)
        c2 = np.zeros(d)
        c2[-1] = 1.0
        x = barrier_minimize(c2, [blk2] + side_blocks(0), x, a=trace_row, gap=1e-10)
    P, e1, e2, sg = unpack(x)
    lam = lam_max(x)
    if not lam < 0:
        raise InfeasibleLMI(f"certificate check failed: lambda_max = {lam:.3e}", lam)
    return ObserverGain(L=observer_gain(P, C, sg), P=P, eps1=float(e1), eps2=float(e2),
                        sigma=float(sg), lmi_max_eig=lam, constants=consts, C=C)


def verify_gain(gain: ObserverGain, A, C=None) -> float:
    """Independent re-check of a stored certificate; returns ``lambda_max``."""
    C = gain.C if C is None else C
    M = assemble_lmi(A, C, gain.constants, gain.eps1, gain.eps2, gain.sigma, gain.P)
    lam = float(np.linalg.eigvalsh(M)[-1])
    if not lam < 0:
        raise InfeasibleLMI(f"stored gain fails the LMI: lambda_max = {lam:.3e}", lam)
    if np.linalg.eigvalsh(0.5 * (gain.P + gain.P.T))[0] <= 0:
        raise InfeasibleLMI("stored P is not positive definite", lam)
    if np.max(np.abs(gain.L - observer_gain(gain.P, C, gain.sigma))) > 1e-10:
        raise InfeasibleLMI("stored L does not match sigma/2 P^-1 C^T", lam)
    return lam


def observer_rhs(xhat, u, y, L, split, h):
    """``A x + B u + phi(x) + L (y - h(x))``."""
    return split.A @ xhat + split.B @ u + split.phi(xhat) + L @ (y - h(xhat))


def observer_step(xhat, u, y, L, split, h, dt: float, substeps: int = 10):
    """Advance the observer one sample interval with zero-order hold on ``y``."""
    step = dt / substeps

    def rhs(x, uu, _t):
        return observer_rhs(x, uu, y, L, split, h)

    for _ in range(substeps):
        xhat = rk4_step(rhs, xhat, u, step)
    return xhat
