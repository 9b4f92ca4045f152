"""Small dense log-barrier solver for linear matrix inequalities.

Problems have the form::

    minimize    c @ x
    subject to  G_k(x) = G_k0 + sum_i x_i G_ki  >= 0   (positive definite)
                a @ x = b                             (optional)

and are solved by the classical barrier path: Newton steps on
``tau * c @ x - sum_k log det G_k(x)`` with ``tau`` growing geometrically.
Sizes here are tiny (a few dozen variables, blocks of at most 2n), so every
Hessian is formed explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, solve_triangular


@dataclass
class AffineBlock:
    """``G(x) = G0 + sum_i x[i] * Gs[i]``; ``Gs`` has shape ``(d, k, k)``."""

    G0: np.ndarray
    Gs: np.ndarray

    def __call__(self, x):
        return self.G0 + np.tensordot(x, self.Gs, axes=1)


def _chol(M):
    try:
        c, _ = cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    return np.tril(c)


def _left_solve(Lc, stack):
    """``L^-1 S_i`` for every matrix in ``stack`` (shape ``(d, k, k)``)."""
    d, k, _ = stack.shape
    flat = stack.transpose(1, 0, 2).reshape(k, d * k)
    out = solve_triangular(Lc, flat, lower=True, check_finite=False)
    return out.reshape(k, d, k).transpose(1, 0, 2)


def _barrier_terms(blocks, x):
    """Value, gradient and Hessian of ``-sum log det G_k(x)``; ``None`` if infeasible."""
    d = x.size
    val = 0.0
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    for blk in blocks:
        G = blk(x)
        Lc = _chol(0.5 * (G + G.T))
        if Lc is None:
            return None
        val -= 2.0 * np.sum(np.log(np.diag(Lc)))
        # W_i = L^-1 G_i L^-T
        T = _left_solve(Lc, blk.Gs)
        W = _left_solve(Lc, T.transpose(0, 2, 1))
        Wf = W.reshape(d, -1)
        grad -= np.trace(W, axis1=1, axis2=2)
        hess += Wf @ Wf.T
    return val, grad, hess


def _barrier_value(blocks, x):
    """``-sum log det G_k(x)`` or ``None`` outside the interior."""
    val = 0.0
    for blk in blocks:
        G = blk(x)
        Lc = _chol(0.5 * (G + G.T))
        if Lc is None:
            return None
        val -= 2.0 * np.sum(np.log(np.diag(Lc)))
    return val


def _newton_dir(H, g, a):
    d = g.size
    if a is None:
        try:
            return np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(H, -g, rcond=None)[0]
    K = np.zeros((d + 1, d + 1))
    K[:d, :d] = H
    K[:d, d] = a
    K[d, :d] = a
    rhs = np.concatenate([-g, [0.0]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:d]


def barrier_minimize(c, blocks, x0, a=None, tau0: float = 1.0, mu: float = 10.0,
                     gap: float = 1e-9, stop=None, max_newton: int = 200):
    """Follow the barrier central path from a strictly feasible ``x0``.

    ``stop(x)`` may return True to end early (used by feasibility phases).
    Returns the last iterate.
    """
    x = np.array(x0, dtype=float)
    c = np.asarray(c, dtype=float)
    if _barrier_value(blocks, x) is None:
        raise ValueError("starting point is not strictly feasible")
    n_con = sum(b.G0.shape[0] for b in blocks)
    tau = tau0
    while True:
        for _ in range(max_newton):
            val, g, H = _barrier_terms(blocks, x)
            f = tau * c @ x + val
            g = tau * c + g
            dx = _newton_dir(H, g, a)
            decrement = -g @ dx
            if decrement / 2.0 <= 1e-10:
                break
            step = 1.0
            while True:
                xn = x + step * dx
                bv = _barrier_value(blocks, xn)
                if bv is not None and tau * c @ xn + bv <= f - 0.25 * step * decrement:
                    break
                step *= 0.5
                if step < 1e-14:
                    break
            if step < 1e-14:
                break
            x = xn
            if stop is not None and stop(x):
                return x
        if n_con / tau < gap:
            return x
        tau *= mu
