"""Independent numerical oracles shared by unit and acceptance tests."""
import math

import numpy as np


def random_spd(rng, d, lo=0.1, hi=10.0):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q @ np.diag(rng.uniform(lo, hi, d)) @ q.T


def _gh_nodes(mean, cov, n):
    """Tensor Gauss-Hermite nodes and weights for E_{N(mean, cov)}[.]."""
    d = mean.size
    t, w = np.polynomial.hermite.hermgauss(n)
    L = np.linalg.cholesky(cov)
    grids = np.meshgrid(*([t] * d), indexing="ij")
    u = np.column_stack([g.ravel() for g in grids])
    ws = np.prod(np.meshgrid(*([w] * d), indexing="ij"), axis=0).ravel() / math.pi ** (d / 2)
    return mean + math.sqrt(2.0) * u @ L.T, ws


def kernel(x, y, sigma):
    return np.exp(-np.sum((x - y) ** 2, axis=-1) / (2 * sigma ** 2))


def gh_pair_integral(m1, S1, m2, S2, sigma, n=40):
    """iint k(x, y) N(x|m1,S1) N(y|m2,S2) dx dy by tensor Gauss-Hermite."""
    x, wx = _gh_nodes(np.asarray(m1, float), np.asarray(S1, float), n)
    y, wy = _gh_nodes(np.asarray(m2, float), np.asarray(S2, float), n)
    total = 0.0
    for start in range(0, x.shape[0], 256):
        kx = kernel(x[start:start + 256, None, :], y[None, :, :], sigma)
        total += wx[start:start + 256] @ kx @ wy
    return total


def gh_point_integral(point, m, S, sigma, n=60):
    """int k(point, y) N(y|m,S) dy by tensor Gauss-Hermite."""
    y, wy = _gh_nodes(np.asarray(m, float), np.asarray(S, float), n)
    return float(kernel(np.asarray(point, float)[None, :], y, sigma) @ wy)


def central_difference(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def synthetic_arm_weights(rng, n, K=3, m=11, shift=0.0, shift_after=0.5, concentration=30.0):
    """Per-subject Dirichlet weights, shape (n, m, K), with an optional late shift.

    The shift moves a fraction ``shift`` of component K-1's mass into
    component 0 at times t > shift_after, so components 1..K-2 keep their
    marginal law and only components 0 and K-1 change.
    """
    base = np.linspace(1.0, 2.0, K)
    base = base / base.sum()
    w = rng.dirichlet(concentration * base, size=(n, m))
    if shift:
        late = np.linspace(0, 1, m) > shift_after
        moved = shift * w[:, late, K - 1]
        w[:, late, 0] += moved
        w[:, late, K - 1] -= moved
    return w


def simplex_grid(step):
    """All points of the K=3 simplex on a regular lattice of the given step."""
    n = int(round(1 / step))
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    a1, a2 = i[keep] * step, j[keep] * step
    return np.column_stack([a1, a2, 1.0 - a1 - a2])
