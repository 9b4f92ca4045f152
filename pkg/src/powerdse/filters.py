"""EKF, UKF, square-root UKF and cubature Kalman filter.

All four share one contract: a step takes the posterior at ``t_{k-1}``,
predicts through a discrete transition to ``t_k`` and corrects with the
measurement ``y_k``. Models are described by :class:`DiscreteModel`, whose
callables accept batches of states shape ``(k, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, cholesky, qr, solve_triangular

from .powermodel import fd_jacobian, f_eval, h_eval, jacobian_f, _as_params
from .sim import rk4_step


class NumericalInstability(ArithmeticError):
    """Covariance could not be factorized even after repair."""


class SingularUpdate(ArithmeticError):
    """Innovation covariance is not invertible."""


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class SqrtBelief:
    mean: np.ndarray
    sqrt_factor: np.ndarray

    @property
    def cov(self) -> np.ndarray:
        return self.sqrt_factor @ self.sqrt_factor.T


@dataclass
class FilterConfig:
    Q: np.ndarray
    R: np.ndarray
    ut_kappa: float | None = None
    scaled_ut: tuple[float, float] | None = None  # (alpha, beta) for the scaled UT
    clip: float = 1e-12

    def kappa(self, n: int) -> float:
        return 3.0 - n if self.ut_kappa is None else self.ut_kappa


@dataclass
class StepInfo:
    """Quantities from the update stage, kept for detection statistics."""

    y_pred: np.ndarray
    innovation: np.ndarray
    pyy_diag: np.ndarray


@dataclass
class DiscreteModel:
    """``x_k = transition(x_{k-1}, u, t_{k-1})``, ``y_k = measurement(x_k, t_k)``.

    ``transition_jacobian`` is optional; the EKF falls back to a central
    finite difference of ``transition``.
    """

    transition: Callable
    measurement: Callable
    transition_jacobian: Callable | None = None
    measurement_jacobian: Callable | None = None


# --- covariance helpers -------------------------------------------------------

def symmetrize(P):
    return 0.5 * (P + P.T)


def repair_psd(P, floor: float = 1e-12):
    """Symmetrize and lift eigenvalues below ``floor``."""
    P = symmetrize(P)
    w, V = np.linalg.eigh(P)
    if w[0] >= floor:
        return P
    return symmetrize((V * np.maximum(w, floor)) @ V.T)


def chol_lower(P, floor: float = 1e-12):
    """Lower Cholesky factor, repairing ``P`` by eigenvalue clipping if needed."""
    try:
        return cholesky(P, lower=True)
    except np.linalg.LinAlgError:
        pass
    try:
        return cholesky(repair_psd(P, floor), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalInstability("covariance not factorizable after clipping") from exc


def cholupdate(S, v, sign: float = 1.0):
    """Rank-one update of a lower Cholesky factor: ``S S^T + sign * v v^T``.

    Raises :class:`NumericalInstability` when a downdate loses definiteness.
    """
    S = np.array(S, dtype=float)
    v = np.array(v, dtype=float)
    n = v.size
    for k in range(n):
        skk = S[k, k]
        r2 = skk * skk + sign * v[k] * v[k]
        if r2 <= 0.0 or not np.isfinite(r2):
            raise NumericalInstability("Cholesky downdate lost definiteness")
        r = np.sqrt(r2)
        c, s = r / skk, v[k] / skk
        S[k, k] = r
        if k + 1 < n:
            S[k + 1:, k] = (S[k + 1:, k] + sign * s * v[k + 1:]) / c
            v[k + 1:] = c * v[k + 1:] - s * S[k + 1:, k]
    return S


def qr_lower(M):
    """Lower-triangular ``S`` with ``S S^T = M^T M`` and non-negative diagonal."""
    R = qr(M, mode="r")[0][: M.shape[1]]
    S = R.T
    signs = np.sign(np.diag(S))
    signs[signs == 0] = 1.0
    return S * signs


# --- point sets ---------------------------------------------------------------

def ut_sigma_points(belief, kappa: float, sqrt_factor=None, floor: float = 1e-12,
                    scaled: tuple[float, float] | None = None):
    """Unscented-transform points ``(X, wm, wc)``; ``X`` has shape ``(2n+1, n)``.

    Classic parameterization: spread ``sqrt(n + kappa)``, centre weight
    ``kappa / (n + kappa)``. ``scaled=(alpha, beta)`` switches to the scaled UT.
    """
    mean = np.asarray(belief.mean, dtype=float)
    n = mean.size
    S = chol_lower(belief.cov, floor) if sqrt_factor is None else sqrt_factor
    if scaled is None:
        lam = kappa
        wm0 = wc0 = lam / (n + lam)
    else:
        alpha, beta = scaled
        lam = alpha ** 2 * (n + kappa) - n
        wm0 = lam / (n + lam)
        wc0 = wm0 + 1.0 - alpha ** 2 + beta
    if n + lam <= 0:
        raise NumericalInstability("n + kappa must be positive")
    D = np.sqrt(n + lam) * S.T
    X = np.vstack([mean, mean + D, mean - D])
    wi = 1.0 / (2.0 * (n + lam))
    wm = np.full(2 * n + 1, wi)
    wc = wm.copy()
    wm[0], wc[0] = wm0, wc0
    return X, wm, wc


def cubature_points(belief, sqrt_factor=None, floor: float = 1e-12):
    """Third-degree spherical-radial points ``(X, w)``; ``X`` has shape ``(2n, n)``."""
    mean = np.asarray(belief.mean, dtype=float)
    n = mean.size
    S = chol_lower(belief.cov, floor) if sqrt_factor is None else sqrt_factor
    D = np.sqrt(n) * S.T
    X = np.vstack([mean + D, mean - D])
    return X, np.full(2 * n, 1.0 / (2 * n))


def weighted_moments(X, wm, wc=None):
    wc = wm if wc is None else wc
    mean = wm @ X
    dX = X - mean
    return mean, (dX * wc[:, None]).T @ dX


# --- shared update ------------------------------------------------------------

def _kalman_gain(Pxy, Pyy):
    try:
        c = cho_solve((cholesky(Pyy, lower=True), True), Pxy.T)
    except np.linalg.LinAlgError as exc:
        raise SingularUpdate("innovation covariance not positive definite") from exc
    return c.T


def _sigma_update(X_pred, mean_pred, P_pred, Y_pts, w_mean, w_cov, y, R, clip):
    y_pred = w_mean @ Y_pts
    dY = Y_pts - y_pred
    dX = X_pred - mean_pred
    Pyy = (dY * w_cov[:, None]).T @ dY + R
    Pxy = (dX * w_cov[:, None]).T @ dY
    K = _kalman_gain(Pxy, Pyy)
    innov = y - y_pred
    mean = mean_pred + K @ innov
    P = repair_psd(P_pred - K @ Pyy @ K.T, clip)
    return GaussianBelief(mean, P), StepInfo(y_pred, innov, np.diag(Pyy).copy())


# --- EKF ----------------------------------------------------------------------

def ekf_step(belief: GaussianBelief, u, y, model: DiscreteModel, cfg: FilterConfig,
             t_prev: float, t: float):
    m = belief.mean
    if model.transition_jacobian is not None:
        F = model.transition_jacobian(m, u, t_prev)
    else:
        F = fd_jacobian(lambda z: model.transition(z, u, t_prev), m)
    mean_pred = np.asarray(model.transition(m[None, :], u, t_prev))[0]
    P_pred = symmetrize(F @ belief.cov @ F.T + cfg.Q)
    if model.measurement_jacobian is not None:
        H = model.measurement_jacobian(mean_pred, t)
    else:
        H = fd_jacobian(lambda z: model.measurement(z, t), mean_pred)
    y_pred = np.asarray(model.measurement(mean_pred[None, :], t))[0]
    Pyy = H @ P_pred @ H.T + cfg.R
    K = _kalman_gain(P_pred @ H.T, Pyy)
    innov = y - y_pred
    mean = mean_pred + K @ innov
    IKH = np.eye(m.size) - K @ H
    P = repair_psd(IKH @ P_pred @ IKH.T + K @ cfg.R @ K.T, cfg.clip)
    return GaussianBelief(mean, P), StepInfo(y_pred, innov, np.diag(Pyy).copy())


# --- UKF ----------------------------------------------------------------------

def ukf_step(belief: GaussianBelief, u, y, model: DiscreteModel, cfg: FilterConfig,
             t_prev: float, t: float):
    n = belief.mean.size
    kappa = cfg.kappa(n)
    X, wm, wc = ut_sigma_points(belief, kappa, floor=cfg.clip, scaled=cfg.scaled_ut)
    Xp = np.asarray(model.transition(X, u, t_prev))
    mean_pred, P_pred = weighted_moments(Xp, wm, wc)
    P_pred = repair_psd(P_pred + cfg.Q, cfg.clip)
    X2, wm2, wc2 = ut_sigma_points(GaussianBelief(mean_pred, P_pred), kappa,
                                   floor=cfg.clip, scaled=cfg.scaled_ut)
    Y = np.asarray(model.measurement(X2, t))
    return _sigma_update(X2, mean_pred, P_pred, Y, wm2, wc2, y, cfg.R, cfg.clip)


# --- SR-UKF -------------------------------------------------------------------

def _sqrt_moments(X, mean, wc, sqrt_noise):
    """Lower factor of ``sum_i wc_i dX_i dX_i^T + N N^T`` via QR and a rank-one fix.

    Requires ``wc[1:]`` equal and positive; a negative centre weight is a
    downdate.
    """
    dX = X - mean
    M = np.vstack([np.sqrt(wc[1]) * dX[1:], sqrt_noise.T])
    S = qr_lower(M)
    w0 = wc[0]
    if w0 != 0.0:
        S = cholupdate(S, np.sqrt(abs(w0)) * dX[0], np.sign(w0))
    return S


def _rebuild(X, mean, wc, noise_cov, clip):
    dX = X - mean
    P = (dX * wc[:, None]).T @ dX + noise_cov
    return chol_lower(repair_psd(P, clip), clip)


def srukf_step(belief: SqrtBelief, u, y, model: DiscreteModel, cfg: FilterConfig,
               t_prev: float, t: float, sqrt_Q=None, sqrt_R=None):
    n = belief.mean.size
    kappa = cfg.kappa(n)
    sqrt_Q = chol_lower(cfg.Q, cfg.clip) if sqrt_Q is None else sqrt_Q
    sqrt_R = chol_lower(cfg.R, cfg.clip) if sqrt_R is None else sqrt_R

    X, wm, wc = ut_sigma_points(belief, kappa, sqrt_factor=belief.sqrt_factor,
                                scaled=cfg.scaled_ut)
    Xp = np.asarray(model.transition(X, u, t_prev))
    mean_pred = wm @ Xp
    try:
        S_pred = _sqrt_moments(Xp, mean_pred, wc, sqrt_Q)
    except NumericalInstability:
        S_pred = _rebuild(Xp, mean_pred, wc, cfg.Q, cfg.clip)

    pred = SqrtBelief(mean_pred, S_pred)
    X2, wm2, wc2 = ut_sigma_points(pred, kappa, sqrt_factor=S_pred, scaled=cfg.scaled_ut)
    Y = np.asarray(model.measurement(X2, t))
    y_pred = wm2 @ Y
    try:
        S_y = _sqrt_moments(Y, y_pred, wc2, sqrt_R)
    except NumericalInstability:
        S_y = _rebuild(Y, y_pred, wc2, cfg.R, cfg.clip)
    dX = X2 - mean_pred
    dY = Y - y_pred
    Pxy = (dX * wc2[:, None]).T @ dY
    if np.any(np.diag(S_y) <= 0):
        raise SingularUpdate("innovation square root is singular")
    K = solve_triangular(S_y.T, solve_triangular(S_y, Pxy.T, lower=True), lower=False).T
    innov = y - y_pred
    mean = mean_pred + K @ innov
    U = K @ S_y
    try:
        S = S_pred
        for j in range(U.shape[1]):
            S = cholupdate(S, U[:, j], -1.0)
    except NumericalInstability:
        P = S_pred @ S_pred.T - U @ U.T
        S = chol_lower(repair_psd(P, cfg.clip), cfg.clip)
    pyy = np.sum(S_y * S_y, axis=1)
    return SqrtBelief(mean, S), StepInfo(y_pred, innov, pyy)


# --- CKF ----------------------------------------------------------------------

def ckf_step(belief: GaussianBelief, u, y, model: DiscreteModel, cfg: FilterConfig,
             t_prev: float, t: float):
    X, w = cubature_points(belief, floor=cfg.clip)
    Xp = np.asarray(model.transition(X, u, t_prev))
    mean_pred, P_pred = weighted_moments(Xp, w)
    P_pred = repair_psd(P_pred + cfg.Q, cfg.clip)
    X2, w2 = cubature_points(GaussianBelief(mean_pred, P_pred), floor=cfg.clip)
    Y = np.asarray(model.measurement(X2, t))
    return _sigma_update(X2, mean_pred, P_pred, Y, w2, w2, y, cfg.R, cfg.clip)


# --- power-system model -------------------------------------------------------

def discrete_f(x, u, Y, dt: float, model, substeps: int = 10):
    """RK4 propagation of the estimator model over ``dt`` (no unknown inputs)."""
    x = np.asarray(x, dtype=float)
    if dt == 0:
        return x.copy()
    pr = _as_params(model)
    h = dt / substeps

    def rhs(z, uu, _t):
        return f_eval(z, uu, Y, pr)

    for _ in range(substeps):
        x = rk4_step(rhs, x, u, h)
    return x


def rk4_transition_matrix(J, dt: float, substeps: int = 10):
    """Transition matrix of RK4 applied to ``x' = J x`` with ``substeps`` steps."""
    n = J.shape[0]
    hJ = (dt / substeps) * J
    term = np.eye(n)
    step = np.eye(n)
    for k in range(1, 5):
        term = term @ hJ / k
        step = step + term
    return np.linalg.matrix_power(step, substeps)


class PowerSystemModel(DiscreteModel):
    """Estimator-side model of a :class:`SystemCase`.

    Uses ``Y_pre`` before ``wrong_until`` and ``Y_post`` afterwards; inputs
    are whatever the caller passes (normally the steady-state ``u0``).
    """

    def __init__(self, case, dt: float = 1.0 / 60.0, substeps: int = 10,
                 wrong_until: float = 1.0):
        self.case = case
        self.params = case.params()
        self.dt = dt
        self.substeps = substeps
        self.wrong_until = wrong_until
        super().__init__(self._transition, self._measurement, self._transition_jac)

    def Y_at(self, t: float):
        # small tolerance so that t_k = 1.0 computed as k/60 counts as post-switch
        return self.case.Y_pre if t < self.wrong_until - 1e-9 else self.case.Y_post

    def _transition(self, X, u, t):
        return discrete_f(X, u, self.Y_at(t), self.dt, self.params, self.substeps)

    def _measurement(self, X, t):
        return h_eval(X, self.Y_at(t), self.params)

    def _transition_jac(self, x, u, t):
        J = jacobian_f(x, u, self.Y_at(t), self.params)
        return rk4_transition_matrix(J, self.dt, self.substeps)


def initial_belief(case, p0: float = 0.1) -> GaussianBelief:
    """Rotor speeds at synchronous speed, every other state doubled, ``P0 = p0 I``."""
    m = case.m
    mean = 2.0 * case.x0
    mean[m:2 * m] = case.omega_s
    return GaussianBelief(mean, p0 * np.eye(case.n))


def to_sqrt(belief: GaussianBelief) -> SqrtBelief:
    return SqrtBelief(belief.mean.copy(), chol_lower(belief.cov))
