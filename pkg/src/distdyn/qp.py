"""Exact minimization of a convex quadratic over the probability simplex.

Solves  min_a  a^T Q a - 2 a^T J  subject to  a >= 0, sum(a) = 1,  with
Q = I + diag(lam), using a primal active-set method.
"""
from __future__ import annotations

import numpy as np

from .core import NumericalError, SimplexVector

PSD_TOL = -1e-10


def _eqp(Q: np.ndarray, J: np.ndarray, free: np.ndarray) -> np.ndarray:
    """Minimizer over {a : a_i = 0 off ``free``, sum(a) = 1} (min-norm if singular)."""
    K = Q.shape[0]
    idx = np.flatnonzero(free)
    n = idx.size
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = 2.0 * Q[np.ix_(idx, idx)]
    kkt[:n, n] = -1.0
    kkt[n, :n] = 1.0
    rhs = np.append(2.0 * J[idx], 1.0)
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    if not np.allclose(kkt @ sol, rhs, atol=1e-10):
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    out = np.zeros(K)
    out[idx] = sol[:n]
    return out


def kkt_residual(Q: np.ndarray, J: np.ndarray, a: np.ndarray) -> float:
    """Largest violation of the simplex KKT conditions at ``a``."""
    g = 2.0 * Q @ a - 2.0 * J
    support = a > 0
    nu = g[support].mean()
    stationarity = np.abs(g[support] - nu).max(initial=0.0)
    dual = np.maximum(nu - g[~support], 0.0).max(initial=0.0)
    primal = max(abs(a.sum() - 1.0), max(-a.min(), 0.0))
    return float(max(stationarity, dual, primal))


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / ks > 0)[-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _projected_gradient(Q, J, a, iters=20000):
    step = 1.0 / (2.0 * max(np.linalg.eigvalsh(Q).max(), 1e-12))
    y, a_prev, t = a.copy(), a.copy(), 1.0
    for _ in range(iters):
        a_new = project_simplex(y - step * (2.0 * Q @ y - 2.0 * J))
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = a_new + ((t - 1.0) / t_new) * (a_new - a_prev)
        if np.abs(a_new - a_prev).max() < 1e-15:
            a_prev = a_new
            break
        a_prev, t = a_new, t_new
    # Polish on the identified support.
    free = a_prev > 1e-10
    polished = _eqp(Q, J, free)
    if polished.min() >= 0 and kkt_residual(Q, J, polished) <= kkt_residual(Q, J, a_prev):
        return polished
    return a_prev


def _active_set(Q, J, max_changes):
    K = Q.shape[0]
    grad0 = np.diag(Q) - 2.0 * J  # objective at each vertex
    a = np.zeros(K)
    a[int(np.argmin(grad0))] = 1.0
    free = a > 0
    changes = 0
    while changes <= max_changes:
        p = _eqp(Q, J, free)
        if np.all(p[free] >= -1e-14):
            a = np.where(free, np.maximum(p, 0.0), 0.0)
            g = 2.0 * Q @ a - 2.0 * J
            nu = g[free].mean()
            slack = np.where(free, np.inf, g - nu)
            j = int(np.argmin(slack))
            if slack[j] >= -1e-12:
                return a, True
            free[j] = True
            changes += 1
        else:
            d = p - a
            blocking = free & (d < 0)
            ratios = np.where(blocking, a / np.where(blocking, -d, 1.0), np.inf)
            step = min(1.0, ratios.min())
            a = a + step * d
            drop = blocking & (ratios <= step + 1e-15)
            a[drop] = 0.0
            free &= ~drop
            a = np.where(free, a, 0.0)
            changes += 1
    return a, False


def solve_simplex_qp(I, J, lam=0.0) -> SimplexVector:
    """Exact minimizer of a^T I a - 2 a^T J + sum_s lam_s a_s^2 over the simplex."""
    I = np.asarray(I, dtype=float)
    J = np.asarray(J, dtype=float).ravel()
    K = J.size
    if I.shape != (K, K):
        raise ValueError("I must be K x K with K = len(J)")
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (K,))
    if np.any(lam < 0):
        raise ValueError("ridge entries must be >= 0")
    Isym = 0.5 * (I + I.T)
    if not np.all(np.isfinite(Isym)) or np.linalg.eigvalsh(Isym).min() < PSD_TOL * max(1.0, np.abs(Isym).max()):
        raise NumericalError("gram matrix is not positive semi-definite")
    if K == 1:
        return SimplexVector([1.0])
    Q = Isym + np.diag(lam)
    a, ok = _active_set(Q, J, max_changes=2 * K)
    if not ok:
        a = _projected_gradient(Q, J, project_simplex(a))
    a = np.maximum(a, 0.0)
    return SimplexVector(a / a.sum())
