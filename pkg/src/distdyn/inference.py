"""Two-sample MMD tests on weight trajectories, p-value curves and quantile summaries.

For each component k and inference time t_j the per-subject weights of the two
arms form two scalar samples. The scaled V-statistic

    T = n0 n1 / (n0 + n1) * MMD^2

is calibrated either by a Rademacher multiplier (wild) bootstrap on the
doubly-centered pooled kernel matrix or by label permutation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .core import InputError
from .kernel import median_heuristic

METHODS = ("wild", "permutation")
PVALUE_COLUMNS = ("component", "time_index", "time", "statistic", "p_value",
                  "p_value_bonferroni", "method", "B", "seed")
QUANTILE_COLUMNS = ("component", "time", "prob", "value")


class UnsupportedError(InputError):
    """Requested analysis is outside the supported scope."""


@dataclass(frozen=True)
class ArmTrajectories:
    """Predicted weights of one arm: ``weights[p, j, k]`` for subject p at time j."""

    arm: int | str
    times: np.ndarray
    weights: np.ndarray
    subject_ids: tuple = ()

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        w = np.array(self.weights, dtype=float)
        if w.ndim != 3:
            raise InputError("weights must have shape (subjects, times, K)")
        if w.shape[1] != times.size:
            raise InputError("weights and times disagree on the grid length")
        if w.shape[0] < 1 or w.shape[2] < 1:
            raise InputError("need at least one subject and one component")
        if not np.all(np.isfinite(w)) or np.any(w < -1e-9):
            raise InputError("weights must be finite and nonnegative")
        if np.any(np.abs(w.sum(axis=2) - 1.0) > 1e-6):
            raise InputError("each weight row must lie on the simplex")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise InputError("times must be strictly increasing")
        ids = tuple(str(s) for s in self.subject_ids)
        if ids and len(ids) != w.shape[0]:
            raise InputError("subject_ids length must match the subject count")
        times.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "subject_ids", ids)

    @property
    def n_subjects(self) -> int:
        return self.weights.shape[0]

    @property
    def K(self) -> int:
        return self.weights.shape[2]

    def cell(self, k: int, j: int) -> np.ndarray:
        return self.weights[:, j, k]


@dataclass(frozen=True)
class TestResult:
    component: int
    time_index: int
    statistic: float
    p_value: float
    B: int
    method: str
    seed: int
    bandwidth: float = float("nan")
    time: float = float("nan")

    __test__ = False  # keep pytest from collecting this class


def _vec(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise InputError("samples must be finite")
    return arr


def _pooled(x, y):
    x, y = _vec(x), _vec(y)
    if x.size < 2 or y.size < 2:
        raise InputError("each sample needs at least 2 points")
    return x, y, np.concatenate([x, y])


def pooled_bandwidth(x, y) -> float:
    """Median heuristic on the pooled sample; raises on a degenerate sample."""
    _, _, z = _pooled(x, y)
    return median_heuristic(z)


def _gram(z: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-cdist(z[:, None], z[:, None], "sqeuclidean") / (2.0 * sigma ** 2))


def _coefficients(n0: int, n1: int) -> np.ndarray:
    return np.concatenate([np.full(n0, 1.0 / n0), np.full(n1, -1.0 / n1)])


def _scaled(c: np.ndarray, kmat: np.ndarray, n0: int, n1: int) -> float:
    return float(n0 * n1 / (n0 + n1) * (c @ kmat @ c))


def two_sample_statistic(x, y, sigma: float | None = None) -> float:
    """Scaled V-statistic n0 n1/(n0+n1) MMD^2 with a Gaussian kernel."""
    x, y, z = _pooled(x, y)
    if sigma is None:
        sigma = median_heuristic(z)
    elif not sigma > 0:
        raise InputError("sigma must be > 0")
    kmat = _gram(z, sigma)
    n0, n1 = x.size, y.size
    kxx = kmat[:n0, :n0].mean()
    kyy = kmat[n0:, n0:].mean()
    kxy = kmat[:n0, n0:].mean()
    return max(n0 * n1 / (n0 + n1) * (kxx + kyy - 2.0 * kxy), 0.0)


def _pvalue(observed: float, replicates: np.ndarray) -> float:
    # Tiny relative slack so replicates equal to T up to rounding count as ties.
    tol = 1e-12 * max(1.0, abs(observed))
    return float(np.mean(replicates >= observed - tol))


def _check_B(B: int):
    if int(B) != B or B < 100:
        raise InputError("B must be an integer >= 100")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed))


def _seed_label(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        ent = seed.entropy
        return int(ent[0] if isinstance(ent, (list, tuple)) else ent)
    if isinstance(seed, (list, tuple)):
        return int(seed[0])
    return int(seed)


def wild_bootstrap_pvalue(x, y, sigma: float | None = None, B: int = 1000,
                          seed=0) -> TestResult:
    """Multiplier-bootstrap p-value (1/B) sum_b 1{T*_b >= T}.

    Each replicate re-signs the per-observation coefficients with i.i.d.
    Rademacher variables and evaluates the quadratic form on the
    doubly-centered pooled kernel matrix.
    """
    _check_B(B)
    x, y, z = _pooled(x, y)
    if sigma is None:
        sigma = median_heuristic(z)
    n0, n1 = x.size, y.size
    kmat = _gram(z, sigma)
    c = _coefficients(n0, n1)
    observed = max(_scaled(c, kmat, n0, n1), 0.0)
    centered = kmat - kmat.mean(axis=0) - kmat.mean(axis=1)[:, None] + kmat.mean()
    signs = _rng(seed).choice(np.array([-1.0, 1.0]), size=(int(B), z.size))
    cw = signs * c
    reps = n0 * n1 / (n0 + n1) * np.sum((cw @ centered) * cw, axis=1)
    return TestResult(component=0, time_index=0, statistic=observed,
                      p_value=_pvalue(observed, reps), B=int(B), method="wild",
                      seed=_seed_label(seed), bandwidth=float(sigma))


def permutation_pvalue(x, y, sigma: float | None = None, B: int = 1000,
                       seed=0) -> TestResult:
    """Label-permutation p-value with the same indicator average."""
    _check_B(B)
    x, y, z = _pooled(x, y)
    if sigma is None:
        sigma = median_heuristic(z)
    n0, n1 = x.size, y.size
    kmat = _gram(z, sigma)
    c = _coefficients(n0, n1)
    observed = max(_scaled(c, kmat, n0, n1), 0.0)
    rng = _rng(seed)
    perms = np.argsort(rng.random((int(B), z.size)), axis=1)
    cp = c[perms]
    reps = n0 * n1 / (n0 + n1) * np.sum((cp @ kmat) * cp, axis=1)
    return TestResult(component=0, time_index=0, statistic=observed,
                      p_value=_pvalue(observed, reps), B=int(B), method="permutation",
                      seed=_seed_label(seed), bandwidth=float(sigma))


def check_compatible(arm0: ArmTrajectories, arm1: ArmTrajectories):
    if arm0.K != arm1.K:
        raise InputError(f"arms disagree on K ({arm0.K} vs {arm1.K})")
    if arm0.times.shape != arm1.times.shape or not np.allclose(arm0.times, arm1.times,
                                                               rtol=0, atol=1e-12):
        raise InputError("arms are evaluated on different time grids")


def _cell(arm0, arm1, k, j, B, method, seed):
    x, y = arm0.cell(k, j), arm1.cell(k, j)
    cell_seed = np.random.SeedSequence([int(seed), int(k), int(j)])
    t = float(arm0.times[j])
    try:
        sigma = pooled_bandwidth(x, y)
    except InputError:
        if x.size < 2 or y.size < 2:
            raise
        # All pooled values (nearly) tied: no evidence against the null.
        return TestResult(k, j, 0.0, 1.0, int(B), method, int(seed), float("nan"), t)
    fn = wild_bootstrap_pvalue if method == "wild" else permutation_pvalue
    res = fn(x, y, sigma, B, cell_seed)
    return TestResult(k, j, res.statistic, res.p_value, int(B), method, int(seed),
                      res.bandwidth, t)


def pvalue_curves(arm0: ArmTrajectories, arm1: ArmTrajectories, B: int = 1000,
                  method: str = "wild", seed: int = 0, threads: int = 1) -> list:
    """K x m nested list of TestResult, one test per (component, time).

    Cell randomness derives from SeedSequence([seed, k, j]) only, so results do
    not depend on evaluation order or parallelism.
    """
    if method not in METHODS:
        raise InputError(f"method must be one of {METHODS}")
    _check_B(B)
    check_compatible(arm0, arm1)
    K, m = arm0.K, arm0.times.size
    cells = [(k, j) for k in range(K) for j in range(m)]
    if threads > 1:
        from joblib import Parallel, delayed
        flat = Parallel(n_jobs=threads, prefer="threads")(
            delayed(_cell)(arm0, arm1, k, j, B, method, seed) for k, j in cells)
    else:
        flat = [_cell(arm0, arm1, k, j, B, method, seed) for k, j in cells]
    return [flat[k * m:(k + 1) * m] for k in range(K)]


def pvalue_matrix(results) -> np.ndarray:
    return np.array([[r.p_value for r in row] for row in results])


def write_pvalue_csv(results, path) -> Path:
    path = Path(path)
    flat = [r for row in results for r in row]
    n_tests = max(1, len(flat))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PVALUE_COLUMNS)
        for r in flat:
            w.writerow([r.component, r.time_index, repr(float(r.time)), repr(float(r.statistic)),
                        repr(float(r.p_value)), repr(min(1.0, r.p_value * n_tests)),
                        r.method, r.B, r.seed])
    return path


def read_pvalue_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PVALUE_COLUMNS:
            raise InputError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for row in reader:
            p = float(row["p_value"])
            if not 0.0 <= p <= 1.0 or float(row["statistic"]) < 0:
                raise InputError(f"{path}: invalid row {row}")
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# descriptive summaries

def centered_quantile_curves(arm: ArmTrajectories, probs) -> np.ndarray:
    """Pointwise quantiles across subjects of Z(t) = alpha(t) - alpha(t_0).

    Returns an array of shape (K, m, len(probs)).
    """
    probs = np.asarray(probs, dtype=float).reshape(-1)
    if probs.size == 0 or np.any(probs <= 0) or np.any(probs >= 1):
        raise InputError("probs must lie strictly inside (0, 1)")
    z = arm.weights - arm.weights[:, :1, :]
    q = np.quantile(z, probs, axis=0)  # (P, m, K)
    return np.transpose(q, (2, 1, 0))


def write_quantile_csv(curves: dict, times, probs, path) -> Path:
    """``curves`` maps an arm label to the (K, m, P) array of quantiles.

    A single array is also accepted. The arm column is only written when
    more than one arm is present.
    """
    path = Path(path)
    if not isinstance(curves, dict):
        curves = {None: curves}
    multi = len(curves) > 1
    header = (("arm",) if multi else ()) + QUANTILE_COLUMNS
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for label, arr in curves.items():
            K, m, P = arr.shape
            for k in range(K):
                for j in range(m):
                    for p in range(P):
                        row = [k, repr(float(times[j])), repr(float(probs[p])),
                               repr(float(arr[k, j, p]))]
                        w.writerow(([label] if multi else []) + row)
    return path


@dataclass(frozen=True)
class Barycenter:
    probs: np.ndarray
    quantiles: np.ndarray
    grid: np.ndarray
    density: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.quantiles))


def wasserstein1d_barycenter(samples, grid_size: int = 200,
                             n_probs: int = 1000) -> Barycenter:
    """Average the empirical quantile functions on a midpoint probability grid.

    The density is a lightly smoothed histogram of the barycenter quantiles on
    ``grid_size`` equal-width bins.
    """
    if len(samples) == 0:
        raise InputError("need at least one sample")
    vecs = []
    for s in samples:
        arr = np.asarray(s, dtype=float)
        if arr.ndim == 2 and arr.shape[1] != 1:
            raise UnsupportedError("barycenters are only supported for d = 1")
        if arr.ndim > 2:
            raise UnsupportedError("barycenters are only supported for d = 1")
        arr = arr.reshape(-1)
        if arr.size == 0 or not np.all(np.isfinite(arr)):
            raise InputError("samples must be non-empty and finite")
        vecs.append(arr)
    if grid_size < 2 or n_probs < 1:
        raise InputError("grid_size must be >= 2 and n_probs >= 1")
    probs = (np.arange(n_probs) + 0.5) / n_probs
    # inverted_cdf is the left-continuous empirical quantile function
    qs = np.mean([np.quantile(v, probs, method="inverted_cdf") for v in vecs], axis=0)
    lo, hi = float(qs.min()), float(qs.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, grid_size + 1)
    hist, _ = np.histogram(qs, bins=edges, density=True)
    smooth = np.convolve(hist, np.array([0.25, 0.5, 0.25]), mode="same")
    width = edges[1] - edges[0]
    smooth = smooth / (smooth.sum() * width)
    grid = 0.5 * (edges[1:] + edges[:-1])
    return Barycenter(probs=probs, quantiles=qs, grid=grid, density=smooth)


def rejection_fraction(results, level: float = 0.05) -> float:
    p = pvalue_matrix(results)
    return float(np.mean(p < level)) if p.size else math.nan
