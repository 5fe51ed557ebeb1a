"""Discrete-time fit of a shared-dictionary Gaussian mixture by MMD minimization.

At time t_i with Gaussian kernel bandwidth sigma_i, the squared MMD between the
empirical measure and the mixture is a quadratic in the weights,

    alpha^T I_i alpha - 2 alpha^T J_i + C_i,

with I_i and J_i in closed form. The fit alternates exact simplex QPs for the
weights with Adam steps on the component means and Cholesky factors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (FittedModel, GaussianDictionary, InputError, NumericalError,
                   SnapshotDataset, TimeGrid, WeightTable)
from .kernel import kernel_matrix, median_heuristic
from .kmeans import kmeans
from .qp import solve_simplex_qp


@dataclass(frozen=True)
class FitConfig:
    K: int = 5
    ridge: float | tuple = 1e-2
    outer_iterations: int = 50
    inner_steps: int = 20
    learning_rate: float = 1e-3
    kmeans_restarts: int = 10
    seed: int = 0
    # Samples larger than this are subsampled for the median heuristic and C_i.
    max_pairwise_points: int = 5000
    cov_jitter: float = 1e-3

    def __post_init__(self):
        if self.K < 1:
            raise InputError("K must be >= 1")
        if self.outer_iterations < 0 or self.inner_steps < 1 or self.kmeans_restarts < 1:
            raise InputError("iteration counts must be >= 1 (outer_iterations >= 0)")
        if not self.learning_rate >= 0:
            raise InputError("learning_rate must be >= 0")
        if np.any(np.asarray(self.ridge, dtype=float) < 0):
            raise InputError("ridge must be >= 0")

    def ridge_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.ridge, dtype=float), (self.K,)).copy()


@dataclass(frozen=True)
class ObjectivePieces:
    I: np.ndarray
    J: np.ndarray
    C: float
    bandwidth: float

    def value(self, alpha, ridge=0.0) -> float:
        a = np.asarray(alpha, dtype=float)
        lam = np.broadcast_to(np.asarray(ridge, dtype=float), a.shape)
        return float(a @ self.I @ a - 2.0 * a @ self.J + self.C + np.sum(lam * a * a))


# ---------------------------------------------------------------------------
# closed-form pieces

def _log_scale(d: int, s2: float, logdet: np.ndarray) -> np.ndarray:
    return 0.5 * d * math.log(s2) - 0.5 * logdet


def _pair_terms(means: np.ndarray, covs: np.ndarray, s2: float):
    K, d = means.shape
    A = covs[:, None] + covs[None, :] + s2 * np.eye(d)
    sign, logdet = np.linalg.slogdet(A)
    if np.any(sign <= 0):
        raise NumericalError("Sigma_s + Sigma_r + sigma^2 Id is not positive definite")
    Ainv = np.linalg.inv(A)
    delta = means[:, None, :] - means[None, :, :]
    u = np.matmul(Ainv, delta[..., None])[..., 0]
    q = np.sum(u * delta, axis=-1)
    gram = np.exp(_log_scale(d, s2, logdet) - 0.5 * q)
    return 0.5 * (gram + gram.T), Ainv, u


def _data_terms(means: np.ndarray, covs: np.ndarray, s2: float, x: np.ndarray):
    K, d = means.shape
    B = covs + s2 * np.eye(d)
    sign, logdet = np.linalg.slogdet(B)
    if np.any(sign <= 0):
        raise NumericalError("Sigma_s + sigma^2 Id is not positive definite")
    Binv = np.linalg.inv(B)
    e = x[None, :, :] - means[:, None, :]
    v = np.matmul(e, Binv)  # Binv is symmetric
    q = np.sum(v * e, axis=-1)
    jk = np.exp(_log_scale(d, s2, logdet)[:, None] - 0.5 * q)
    return jk, Binv, v


def component_gram(dictionary: GaussianDictionary, bandwidth: float) -> np.ndarray:
    """K x K matrix of kernel inner products between the component embeddings."""
    if not bandwidth > 0:
        raise InputError("bandwidth must be > 0")
    gram, _, _ = _pair_terms(dictionary.means, dictionary.covariances, bandwidth ** 2)
    return gram


def data_cross_term(dictionary: GaussianDictionary, bandwidth: float, snapshot) -> np.ndarray:
    """(J)_s: mean over the snapshot of the kernel-smoothed component density."""
    x = np.asarray(snapshot, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if dictionary.dimension == 1 else x[None, :]
    if x.shape[0] < 1 or x.shape[1] != dictionary.dimension:
        raise InputError("snapshot must be a non-empty N x d matrix")
    jk, _, _ = _data_terms(dictionary.means, dictionary.covariances, bandwidth ** 2, x)
    return jk.mean(axis=1)


def data_self_term(snapshot, bandwidth: float, max_points: int | None = None,
                   seed: int = 0) -> float:
    """C = (1/N^2) sum_j sum_l k(X_j, X_l), optionally on a random subsample."""
    x = np.asarray(snapshot, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if max_points is not None and x.shape[0] > max_points:
        rng = np.random.default_rng(seed)
        x = x[rng.choice(x.shape[0], size=max_points, replace=False)]
    total = 0.0
    step = 2048
    for start in range(0, x.shape[0], step):
        total += kernel_matrix(x[start:start + step], x, bandwidth).sum()
    return float(total / x.shape[0] ** 2)


def assemble_objective(dictionary: GaussianDictionary, bandwidth: float, snapshot,
                       max_points: int | None = None) -> ObjectivePieces:
    return ObjectivePieces(
        I=component_gram(dictionary, bandwidth),
        J=data_cross_term(dictionary, bandwidth, snapshot),
        C=data_self_term(snapshot, bandwidth, max_points),
        bandwidth=float(bandwidth),
    )


def population_cross_term(dictionary: GaussianDictionary, bandwidth: float,
                          source: GaussianDictionary, source_weights) -> np.ndarray:
    """E[J_s] when the data follow the mixture ``source`` with ``source_weights``.

    Each expectation is a Gaussian-Gaussian kernel integral, the same algebra
    as the entries of I.
    """
    if source.dimension != dictionary.dimension:
        raise InputError("source and dictionary dimensions differ")
    s2 = bandwidth ** 2
    means = np.concatenate([dictionary.means, source.means])
    covs = np.concatenate([dictionary.covariances, source.covariances])
    gram, _, _ = _pair_terms(means, covs, s2)
    K = dictionary.size
    return gram[:K, K:] @ np.asarray(source_weights, dtype=float)


# ---------------------------------------------------------------------------
# objective over all times and its gradient

def _group_objective(means, covs, alphas, xs, s2, with_grad):
    """Objective and covariance-space gradient for a stack of equal-size snapshots.

    alphas (G, K), xs (G, N, d), s2 (G,).
    """
    K, d = means.shape
    n = xs.shape[1]
    eye = np.eye(d)
    half_d_log = 0.5 * d * np.log(s2)
    # pair terms, shape (G, K, K, ...)
    A = (covs[:, None] + covs[None, :])[None] + s2[:, None, None, None, None] * eye
    sign, logdet = np.linalg.slogdet(A)
    if np.any(sign <= 0):
        raise NumericalError("Sigma_s + Sigma_r + sigma^2 Id is not positive definite")
    Ainv = np.linalg.inv(A)
    delta = means[:, None, :] - means[None, :, :]
    u = np.matmul(Ainv, delta[None, ..., None])[..., 0]
    q = np.sum(u * delta[None], axis=-1)
    gram = np.exp(half_d_log[:, None, None] - 0.5 * logdet - 0.5 * q)
    gram = 0.5 * (gram + np.swapaxes(gram, 1, 2))
    # data terms, shape (G, K, N, ...)
    B = covs[None] + s2[:, None, None, None] * eye
    sign, logdet_b = np.linalg.slogdet(B)
    if np.any(sign <= 0):
        raise NumericalError("Sigma_s + sigma^2 Id is not positive definite")
    Binv = np.linalg.inv(B)
    e = xs[:, None, :, :] - means[None, :, None, :]
    v = np.matmul(e, Binv)
    jk = np.exp((half_d_log[:, None] - 0.5 * logdet_b)[..., None] - 0.5 * np.sum(v * e, axis=-1))
    J = jk.mean(axis=2)
    quad = np.einsum("gk,gkr,gr->", alphas, gram, alphas)
    total = float(quad - 2.0 * np.sum(alphas * J))
    if not with_grad:
        return total, None, None
    W = alphas[:, :, None] * alphas[:, None, :] * gram
    Wu = W[..., None] * u
    g_mean = -2.0 * Wu.sum(axis=(0, 2))
    g_cov = np.matmul(np.swapaxes(Wu, 2, 3), u).sum(axis=0) - np.sum(W[..., None, None] * Ainv, axis=(0, 2))
    jv = jk[..., None] * v
    g_mean += -2.0 * np.sum(alphas[:, :, None] * jv.sum(axis=2), axis=0) / n
    outer = np.matmul(np.swapaxes(jv, 2, 3), v) / n
    g_cov += np.sum(alphas[:, :, None, None] * (J[:, :, None, None] * Binv - outer), axis=0)
    return total, g_mean, g_cov


def dictionary_objective(means, chols, alphas, snapshots, bandwidths, with_grad=True):
    """sum_i (alpha_i^T I_i alpha_i - 2 alpha_i^T J_i) and its gradient.

    Gradients are returned with respect to the means (K, d) and the
    lower-triangular Cholesky factors (K, d, d). Snapshots of equal size are
    evaluated together in one vectorized pass.
    """
    K, d = means.shape
    covs = np.matmul(chols, np.swapaxes(chols, 1, 2))
    groups: dict[int, list[int]] = {}
    for i, x in enumerate(snapshots):
        groups.setdefault(x.shape[0], []).append(i)
    total = 0.0
    g_mean = np.zeros((K, d))
    g_cov = np.zeros((K, d, d))
    for n, idx in groups.items():
        # cap the stacked intermediates at a few million entries
        budget = max(1, 4_000_000 // (K * n * d + K * K * d * d))
        for c in range(0, len(idx), budget):
            sel = idx[c:c + budget]
            xs = np.stack([np.asarray(snapshots[i], dtype=float) for i in sel])
            al = np.stack([np.asarray(alphas[i], dtype=float) for i in sel])
            s2 = np.asarray([bandwidths[i] for i in sel], dtype=float) ** 2
            val, gm, gc = _group_objective(means, covs, al, xs, s2, with_grad)
            total += val
            if with_grad:
                g_mean += gm
                g_cov += gc
    if not with_grad:
        return float(total)
    g_chol = np.tril(2.0 * np.matmul(g_cov, chols))
    return float(total), g_mean, g_chol


@dataclass
class GlobalUpdateResult:
    dictionary: GaussianDictionary
    objective_before: float
    objective_after: float


def global_update(dictionary: GaussianDictionary, weights, dataset_or_snapshots,
                  bandwidths, config: FitConfig) -> GlobalUpdateResult:
    """Adam steps on (m_s, L_s) with the per-time weights held fixed."""
    snapshots = _snapshots_of(dataset_or_snapshots)
    alphas = _rows_of(weights)
    means = np.array(dictionary.means)
    chols = np.array(dictionary.cholesky)
    params = [means, chols]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr = config.learning_rate
    before = None
    for step in range(1, config.inner_steps + 1):
        val, gm, gl = dictionary_objective(means, chols, alphas, snapshots, bandwidths)
        if before is None:
            before = val
        for k in range(means.shape[0]):
            if not (np.all(np.isfinite(gm[k])) and np.all(np.isfinite(gl[k]))):
                raise NumericalError(f"non-finite gradient for component {k}")
        for p, g, mm, vv in zip(params, (gm, gl), m1, m2):
            mm *= b1
            mm += (1 - b1) * g
            vv *= b2
            vv += (1 - b2) * g * g
            p -= lr * (mm / (1 - b1 ** step)) / (np.sqrt(vv / (1 - b2 ** step)) + eps)
        chols = np.tril(chols)
        params[1] = chols
        # Flipping a column's sign leaves L L^T unchanged; keep the diagonal positive.
        for k in range(chols.shape[0]):
            diag = np.diagonal(chols[k])
            neg = diag < 0
            if np.any(neg):
                chols[k][:, neg] *= -1.0
                m1[1][k][:, neg] *= -1.0
            tiny = np.abs(np.diagonal(chols[k])) < 1e-12
            if np.any(tiny):
                idx = np.flatnonzero(tiny)
                chols[k][idx, idx] = 1e-12
    after = dictionary_objective(means, chols, alphas, snapshots, bandwidths, with_grad=False)
    if before is None:
        before = after
    return GlobalUpdateResult(GaussianDictionary.from_arrays(means, chols), before, after)


# ---------------------------------------------------------------------------
# initialization and the alternating scheme

def _snapshots_of(data) -> list:
    if isinstance(data, SnapshotDataset):
        return list(data.snapshots)
    return [np.atleast_2d(np.asarray(x, dtype=float)) for x in data]


def _rows_of(weights) -> list:
    if isinstance(weights, WeightTable):
        return list(weights.rows)
    return [np.asarray(w, dtype=float) for w in weights]


def kmeans_dictionary(snapshots, K: int, restarts: int, seed: int, jitter: float = 1e-3):
    """Dictionary and per-time assignment proportions from pooled k-means."""
    pooled = np.concatenate(snapshots, axis=0)
    n, d = pooled.shape
    if K > n:
        raise InputError(f"K={K} exceeds the pooled sample size {n}")
    centers, labels = kmeans(pooled, K, restarts=restarts, seed=seed)
    pooled_var = float(np.mean(np.var(pooled, axis=0)))
    if not pooled_var > 0:
        raise InputError("degenerate pooled sample: zero variance")
    covs = []
    for s in range(K):
        members = pooled[labels == s]
        if members.shape[0] >= 2:
            diff = members - members.mean(axis=0)
            cov = diff.T @ diff / members.shape[0]
        else:
            cov = np.zeros((d, d))
        evals = np.linalg.eigvalsh(cov)
        if members.shape[0] <= d or evals.min() <= 1e-10 * pooled_var:
            cov = cov + jitter * pooled_var * np.eye(d)
        covs.append(cov)
    dictionary = GaussianDictionary.from_covariances(centers, covs)
    rows = []
    offset = 0
    for x in snapshots:
        lab = labels[offset:offset + x.shape[0]]
        offset += x.shape[0]
        rows.append(np.bincount(lab, minlength=K) / x.shape[0])
    return dictionary, np.array(rows)


def kmeans_init(dataset: SnapshotDataset, K: int, restarts: int = 10, seed: int = 0,
                jitter: float = 1e-3):
    dictionary, rows = kmeans_dictionary(list(dataset.snapshots), K, restarts, seed, jitter)
    return dictionary, WeightTable(dataset.grid, rows)


def compute_bandwidths(snapshots, max_points: int | None = None, seed: int = 0) -> np.ndarray:
    out = []
    for i, x in enumerate(snapshots):
        if max_points is not None and x.shape[0] > max_points:
            rng = np.random.default_rng([seed, i])
            x = x[rng.choice(x.shape[0], size=max_points, replace=False)]
        out.append(median_heuristic(x))
    return np.array(out)


def local_weights(dictionary: GaussianDictionary, snapshots, bandwidths, ridge) -> np.ndarray:
    """Exact per-time simplex QP solutions for a fixed dictionary."""
    rows = []
    for x, sigma in zip(snapshots, bandwidths):
        I = component_gram(dictionary, sigma)
        J = data_cross_term(dictionary, sigma, x)
        rows.append(solve_simplex_qp(I, J, ridge).weights)
    return np.array(rows)


def total_objective(dictionary, rows, snapshots, bandwidths, ridge, data_terms) -> float:
    val = dictionary_objective(dictionary.means, dictionary.cholesky, list(rows),
                               snapshots, bandwidths, with_grad=False)
    return float(val + sum(data_terms) + sum(float(np.sum(ridge * r * r)) for r in rows))


@dataclass
class FitResult:
    model: FittedModel
    objective_trace: list = field(default_factory=list)
    init_dictionary: GaussianDictionary | None = None
    init_weights: np.ndarray | None = None


def fit_snapshots(snapshots, config: FitConfig, bandwidths=None, dictionary=None):
    """Alternating fit on a list of (N_i, d) arrays.

    Returns ``(dictionary, rows, bandwidths, trace, init)`` where ``init`` holds
    the k-means dictionary and weights. Passing ``dictionary`` skips
    initialization and keeps the dictionary fixed unless outer iterations > 0.
    """
    snapshots = _snapshots_of(snapshots)
    if bandwidths is None:
        bandwidths = compute_bandwidths(snapshots, config.max_pairwise_points, config.seed)
    bandwidths = np.asarray(bandwidths, dtype=float)
    ridge = config.ridge_vector()
    if dictionary is None:
        dictionary, rows = kmeans_dictionary(snapshots, config.K, config.kmeans_restarts,
                                             config.seed, config.cov_jitter)
    else:
        rows = local_weights(dictionary, snapshots, bandwidths, ridge)
    init = (dictionary, rows.copy())
    data_terms = [data_self_term(x, s, config.max_pairwise_points, config.seed)
                  for x, s in zip(snapshots, bandwidths)]
    trace = [total_objective(dictionary, rows, snapshots, bandwidths, ridge, data_terms)]
    if config.outer_iterations > 0:
        rows = local_weights(dictionary, snapshots, bandwidths, ridge)
        for _ in range(config.outer_iterations):
            dictionary = global_update(dictionary, rows, snapshots, bandwidths, config).dictionary
            rows = local_weights(dictionary, snapshots, bandwidths, ridge)
            trace.append(total_objective(dictionary, rows, snapshots, bandwidths, ridge,
                                         data_terms))
    return dictionary, rows, bandwidths, trace, init


def fit(dataset: SnapshotDataset, config: FitConfig = FitConfig()) -> FitResult:
    """Run k-means initialization, then ``outer_iterations`` rounds of
    {per-time QP, global update}, then a final QP pass.

    ``objective_trace[0]`` is the penalized objective at the k-means start;
    entry k is the objective after round k and the QP that follows it.
    """
    dictionary, rows, bandwidths, trace, init = fit_snapshots(list(dataset.snapshots), config)
    model = FittedModel(dictionary, WeightTable(dataset.grid, rows), bandwidths,
                        config.ridge_vector(), dataset.time_unit)
    return FitResult(model, trace, init[0], init[1])


def weights_for_dictionary(dictionary: GaussianDictionary, dataset: SnapshotDataset,
                           ridge, max_points: int | None = 5000, seed: int = 0) -> FittedModel:
    """Per-time QP weights against a frozen dictionary (no global updates)."""
    bandwidths = compute_bandwidths(list(dataset.snapshots), max_points, seed)
    ridge = np.broadcast_to(np.asarray(ridge, dtype=float), (dictionary.size,)).copy()
    rows = local_weights(dictionary, list(dataset.snapshots), bandwidths, ridge)
    return FittedModel(dictionary, WeightTable(dataset.grid, rows), bandwidths, ridge,
                       dataset.time_unit)


def grid_of(n: int) -> TimeGrid:
    return TimeGrid(np.linspace(0.0, 1.0, n), 1.0)
