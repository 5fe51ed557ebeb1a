"""Synthetic three-component DGP, time-conditional KDE baseline and L2 benchmark.

Target density at time t in [0, 1]:

    f_t(x) = (1/3) sum_s N(x | m_s(t) 1_d, (1 + t) Id),
    m_1(t) = -2 + 20 t,  m_2(t) = 16 t,  m_3(t) = 5 + 6 t.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .core import GaussianDictionary, InputError, SnapshotDataset, TimeGrid, mixture_density
from .mmd_fit import FitConfig, fit
from .ode_smooth import OdeConfig, predict_weights, train_many

log = logging.getLogger(__name__)

BENCHMARK_COLUMNS = ("method", "d", "n", "replicate", "t", "l2_error", "stderr", "status")
METHODS = ("mmd", "ode", "kde")


@dataclass(frozen=True)
class DgpSpec:
    d: int = 1
    grid: tuple = tuple(i / 10 for i in range(11))
    replicates: int = 100
    sample_sizes: tuple = (20, 50, 100, 200, 300, 500)
    seed: int = 0
    mc_points: int = 200_000
    eval_times: tuple = tuple(i / 20 for i in range(21))
    l2_method: str = "exact"
    methods: tuple = METHODS

    def __post_init__(self):
        for name in ("grid", "sample_sizes", "eval_times", "methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.d < 1:
            raise InputError("d must be >= 1")
        if self.replicates < 1:
            raise InputError("replicates must be >= 1")
        if not self.sample_sizes or min(self.sample_sizes) < 2:
            raise InputError("sample_sizes: every n must be >= 2")
        if self.l2_method not in ("exact", "mc"):
            raise InputError("l2_method must be 'exact' or 'mc'")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise InputError(f"methods: unknown {sorted(unknown)}")
        if any(t < self.grid[0] or t > self.grid[-1] for t in self.eval_times):
            raise InputError("eval_times must lie inside the grid range")
        TimeGrid(np.array(self.grid), 1.0)


# ---------------------------------------------------------------------------
# data-generating process

def dgp_means(t: float) -> np.ndarray:
    return np.array([-2.0 + 20.0 * t, 16.0 * t, 5.0 + 6.0 * t])


def dgp_variance(t: float) -> float:
    return 1.0 + t


def dgp_dictionary(d: int, t: float) -> GaussianDictionary:
    means = np.repeat(dgp_means(t)[:, None], d, axis=1)
    covs = np.broadcast_to(dgp_variance(t) * np.eye(d), (3, d, d))
    return GaussianDictionary.from_covariances(means, covs)


def dgp_density(d: int, t: float, x):
    """Exact DGP density; ``x`` is one point (length d) or an (n, d) array."""
    if not 0.0 <= t <= 1.0:
        raise InputError("t must lie in [0, 1]")
    pts = np.asarray(x, dtype=float)
    single = pts.ndim <= 1 and pts.size == d
    pts = pts.reshape(1, d) if single else pts.reshape(-1, d)
    var = dgp_variance(t)
    sq = np.stack([np.sum((pts - m) ** 2, axis=1) for m in dgp_means(t)], axis=1)
    dens = np.exp(-0.5 * sq / var).mean(axis=1) / (2 * math.pi * var) ** (d / 2)
    return float(dens[0]) if single else dens


def dgp_sample(d: int, t: float, n: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    labels = rng.integers(3, size=n)
    return dgp_means(t)[labels][:, None] + math.sqrt(dgp_variance(t)) * rng.standard_normal((n, d))


def simulate_dataset(spec: DgpSpec, n: int, seed) -> SnapshotDataset:
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    children = ss.spawn(len(spec.grid))
    blocks = tuple(dgp_sample(spec.d, t, n, c) for t, c in zip(spec.grid, children))
    return SnapshotDataset(TimeGrid(np.array(spec.grid), 1.0), blocks)


# ---------------------------------------------------------------------------
# time-conditional KDE

def scott_bandwidths(points: np.ndarray) -> np.ndarray:
    """Per-dimension Scott bandwidths N^{-1/(d+4)} * sd_j, sd floored at 1e-6 * range."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = x.shape
    sd = x.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    rng = np.ptp(x, axis=0)
    floor = np.where(rng > 0, 1e-6 * rng, 1e-6)
    return n ** (-1.0 / (d + 4)) * np.maximum(sd, floor)


def kde_density(points, x) -> np.ndarray:
    """Product-Gaussian KDE with Scott bandwidths evaluated at (m, d) points."""
    data = np.atleast_2d(np.asarray(points, dtype=float))
    h = scott_bandwidths(data)
    q = np.atleast_2d(np.asarray(x, dtype=float))
    sq = cdist(q / h, data / h, "sqeuclidean")
    norm = np.prod(h) * (2 * math.pi) ** (data.shape[1] / 2)
    return np.exp(-0.5 * sq).mean(axis=1) / norm


def _bracket(grid: np.ndarray, t: float):
    if t < grid[0] - 1e-12 or t > grid[-1] + 1e-12:
        raise InputError(f"t={t} outside the grid range")
    i = int(np.searchsorted(grid, t, side="right") - 1)
    i = min(max(i, 0), grid.size - 1)
    if abs(t - grid[i]) <= 1e-12 or i == grid.size - 1:
        return i, i, 0.0
    return i, i + 1, (t - grid[i]) / (grid[i + 1] - grid[i])


def kde_baseline(dataset: SnapshotDataset, t: float, x) -> np.ndarray:
    """KDE at the bracketing grid times, linearly interpolated in t."""
    if min(dataset.sizes) < 2:
        raise InputError("KDE baseline needs at least 2 observations per grid point")
    i, j, lam = _bracket(dataset.grid.points, t)
    q = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, dataset.dimension)
    out = kde_density(dataset.snapshots[i], q)
    if lam == 0.0:
        return out
    return (1.0 - lam) * out + lam * kde_density(dataset.snapshots[j], q)


# ---------------------------------------------------------------------------
# L2 distances

def dgp_box(d: int, t: float):
    sd = math.sqrt(dgp_variance(t))
    m = dgp_means(t)
    return np.full(d, m.min() - 6 * sd), np.full(d, m.max() + 6 * sd)


def l2_error(predicted: Callable, true: Callable, d: int, mc_points: int = 200_000,
             seed=0, box=None, t: Optional[float] = None, chunk: int = 50_000):
    """Uniform Monte-Carlo estimate of the integral of (f_hat - f)^2 over a box.

    Returns ``(estimate, standard_error)``. The box defaults to the DGP
    component means +/- 6 sd at time ``t``.
    """
    if box is None:
        if t is None:
            raise InputError("pass either box or t")
        box = dgp_box(d, t)
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (d,)) for b in box)
    volume = float(np.prod(hi - lo))
    rng = np.random.default_rng(seed)
    s1 = s2 = 0.0
    done = 0
    while done < mc_points:
        m = min(chunk, mc_points - done)
        u = lo + (hi - lo) * rng.random((m, d))
        diff2 = (np.asarray(predicted(u), dtype=float) - np.asarray(true(u), dtype=float)) ** 2
        s1 += diff2.sum()
        s2 += (diff2 ** 2).sum()
        done += m
    mean = s1 / mc_points
    var = max(s2 / mc_points - mean ** 2, 0.0)
    return volume * mean, volume * math.sqrt(var / mc_points)


@dataclass
class MixtureBlock:
    """Weighted Gaussians; ``covs`` is a shared (d, d) matrix or per-component (M, d, d)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    @property
    def shared(self) -> bool:
        return self.covs.ndim == 2


def _overlap_shared(w1, m1, w2, m2, S):
    L = np.linalg.cholesky(S)
    y1 = np.linalg.solve(L, m1.T).T
    y2 = np.linalg.solve(L, m2.T).T
    d = S.shape[0]
    lognorm = -np.sum(np.log(np.diag(L))) - 0.5 * d * math.log(2 * math.pi)
    return float(w1 @ np.exp(lognorm - 0.5 * cdist(y1, y2, "sqeuclidean")) @ w2)


def block_overlap(a: MixtureBlock, b: MixtureBlock) -> float:
    """Integral of the product of two weighted Gaussian sums (closed form)."""
    if a.shared and b.shared:
        return _overlap_shared(a.weights, a.means, b.weights, b.means, a.covs + b.covs)
    if a.shared:
        a, b = b, a
    total = 0.0
    for k in range(a.weights.size):
        if b.shared:
            total += _overlap_shared(a.weights[k:k + 1], a.means[k:k + 1],
                                     b.weights, b.means, a.covs[k] + b.covs)
        else:
            for r in range(b.weights.size):
                total += _overlap_shared(a.weights[k:k + 1], a.means[k:k + 1],
                                         b.weights[r:r + 1], b.means[r:r + 1],
                                         a.covs[k] + b.covs[r])
    return total


def mixture_l2_sq(p: Sequence[MixtureBlock], q: Sequence[MixtureBlock]) -> float:
    """Exact squared L2 distance between two Gaussian mixtures."""
    pp = sum(block_overlap(x, y) for x in p for y in p)
    qq = sum(block_overlap(x, y) for x in q for y in q)
    pq = sum(block_overlap(x, y) for x in p for y in q)
    return max(pp + qq - 2.0 * pq, 0.0)


def dictionary_blocks(dictionary: GaussianDictionary, alpha) -> list:
    return [MixtureBlock(np.asarray(alpha, dtype=float), np.array(dictionary.means),
                         np.array(dictionary.covariances))]


def dgp_blocks(d: int, t: float) -> list:
    means = np.repeat(dgp_means(t)[:, None], d, axis=1)
    return [MixtureBlock(np.full(3, 1.0 / 3.0), means, dgp_variance(t) * np.eye(d))]


def kde_blocks(dataset: SnapshotDataset, t: float) -> list:
    i, j, lam = _bracket(dataset.grid.points, t)
    out = []
    for idx, w in ((i, 1.0 - lam), (j, lam)):
        if w == 0.0:
            continue
        x = dataset.snapshots[idx]
        h = scott_bandwidths(x)
        out.append(MixtureBlock(np.full(x.shape[0], w / x.shape[0]), np.array(x),
                                np.diag(h ** 2)))
    return out


# ---------------------------------------------------------------------------
# benchmark harness

def _l2(spec: DgpSpec, blocks: list, density: Callable, t: float, seed):
    if spec.l2_method == "exact":
        return mixture_l2_sq(blocks, dgp_blocks(spec.d, t)), 0.0
    return l2_error(density, lambda x: dgp_density(spec.d, t, x), spec.d,
                    spec.mc_points, seed, t=t)


def _replicate_seed(spec: DgpSpec, n: int, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([spec.seed, spec.d, n, r])


def _is_grid_time(grid: Sequence[float], t: float) -> bool:
    return any(abs(t - g) <= 1e-9 for g in grid)


def _fit_replicate(spec: DgpSpec, n: int, r: int, fit_config: FitConfig):
    ss = _replicate_seed(spec, n, r)
    data_seed, mc_seed = ss.spawn(2)
    dataset = simulate_dataset(spec, n, data_seed)
    try:
        result = fit(dataset, fit_config)
    except Exception as exc:  # recorded as an error row, never dropped
        log.warning("fit failed for n=%d replicate=%d: %s", n, r, exc)
        return dataset, None, f"error: {type(exc).__name__}: {exc}", mc_seed
    return dataset, result.model, "ok", mc_seed


def run_benchmark(spec: DgpSpec, fit_config: FitConfig = FitConfig(),
                  ode_config: OdeConfig = OdeConfig(), out_path=None,
                  threads: int = 1, collect: dict | None = None) -> list:
    """Simulate, fit, smooth and score every (n, replicate); one row per (method, t).

    If ``collect`` is a dict it receives ``(n, r) -> (FittedModel, OdeWeightModel)``
    for every replicate (either entry may be None after a failure).
    """
    rows = []
    for n in spec.sample_sizes:
        jobs = [(spec, n, r, fit_config) for r in range(spec.replicates)]
        if threads > 1:
            from joblib import Parallel, delayed
            fitted = Parallel(n_jobs=threads)(delayed(_fit_replicate)(*j) for j in jobs)
        else:
            fitted = [_fit_replicate(*j) for j in jobs]
        ok = [i for i, f in enumerate(fitted) if f[1] is not None]
        ode_models = {}
        ode_status = {}
        if "ode" in spec.methods and ok:
            try:
                trained = train_many([fitted[i][1].weight_table for i in ok], ode_config)
                ode_models = {i: res.model for i, res in zip(ok, trained)}
            except Exception as exc:
                ode_status = {i: f"error: {type(exc).__name__}: {exc}" for i in ok}
        for r, (dataset, model, status, mc_seed) in enumerate(fitted):
            if collect is not None:
                collect[(n, r)] = (model, ode_models.get(r))
            mc = mc_seed.generate_state(1)[0]
            alphas = None
            if r in ode_models:
                alphas = predict_weights(ode_models[r], np.array(spec.eval_times) * ode_config.T)
            for k, t in enumerate(spec.eval_times):
                for method in spec.methods:
                    if method == "mmd" and not _is_grid_time(spec.grid, t):
                        continue
                    row = {"method": method, "d": spec.d, "n": n, "replicate": r, "t": t,
                           "l2_error": float("nan"), "stderr": float("nan"), "status": "ok"}
                    if method == "kde":
                        err = _l2(spec, kde_blocks(dataset, t),
                                  lambda x: kde_baseline(dataset, t, x), t, mc)
                    elif model is None:
                        row["status"] = status
                        rows.append(row)
                        continue
                    elif method == "mmd":
                        i = int(np.argmin(np.abs(dataset.grid.points - t)))
                        a = model.weight_table.rows[i]
                        err = _l2(spec, dictionary_blocks(model.dictionary, a),
                                  lambda x, a=a: mixture_density(model.dictionary, a, x), t, mc)
                    else:
                        if alphas is None:
                            row["status"] = ode_status.get(r, "error: ode missing")
                            rows.append(row)
                            continue
                        a = alphas[k]
                        err = _l2(spec, dictionary_blocks(model.dictionary, a),
                                  lambda x, a=a: mixture_density(model.dictionary, a, x), t, mc)
                    row["l2_error"], row["stderr"] = err
                    rows.append(row)
    if out_path is not None:
        write_benchmark_csv(rows, out_path)
    return rows


def write_benchmark_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCHMARK_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_benchmark_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != BENCHMARK_COLUMNS:
            raise InputError(f"{path}: unexpected benchmark columns {reader.fieldnames}")
        out = []
        for row in reader:
            out.append({"method": row["method"], "d": int(row["d"]), "n": int(row["n"]),
                        "replicate": int(row["replicate"]), "t": float(row["t"]),
                        "l2_error": float(row["l2_error"]), "stderr": float(row["stderr"]),
                        "status": row["status"]})
        return out


def summarize(rows) -> list:
    """Mean and median L2 error per (method, n, t) over successful replicates."""
    groups: dict = {}
    for row in rows:
        if row["status"] != "ok":
            continue
        groups.setdefault((row["method"], row["d"], row["n"], row["t"]), []).append(row["l2_error"])
    out = []
    for (method, d, n, t), vals in sorted(groups.items()):
        out.append({"method": method, "d": d, "n": n, "t": t, "replicates": len(vals),
                    "mean_l2": float(np.mean(vals)), "median_l2": float(np.median(vals))})
    return out
