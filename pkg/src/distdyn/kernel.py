"""Gaussian kernel, median-heuristic bandwidth and V-statistic MMD."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .core import InputError


@dataclass(frozen=True)
class KernelSpec:
    bandwidth: float
    dimension: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise InputError("kernel bandwidth must be finite and > 0")
        if self.dimension < 1:
            raise InputError("kernel dimension must be >= 1")


def _matrix(sample, d: int | None = None) -> np.ndarray:
    arr = np.asarray(sample, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[:, None] if d in (None, 1) else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise InputError("sample must be an N x d matrix")
    return arr


def gauss_kernel(spec: KernelSpec, x, y) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape or x.size != spec.dimension:
        raise InputError("kernel arguments must both have dimension d")
    diff = x - y
    return math.exp(-float(diff @ diff) / (2.0 * spec.bandwidth ** 2))


def kernel_matrix(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth ** 2))


def median_heuristic(sample) -> float:
    """Median of the pairwise Euclidean distances over distinct pairs i < j."""
    x = _matrix(sample)
    if x.shape[0] < 2:
        raise InputError("median heuristic needs at least 2 points")
    sigma = float(np.median(pdist(x)))
    if not sigma > 0:
        raise InputError("degenerate sample: zero median distance")
    return sigma


def _ordered_mean(mat: np.ndarray) -> float:
    # Summing the sorted entries makes the result independent of row order.
    return float(np.sort(mat, axis=None).sum() / mat.size)


def empirical_mmd2(spec: KernelSpec, sample_a, sample_b) -> float:
    """Biased (V-statistic) squared MMD between two samples."""
    a = _matrix(sample_a, spec.dimension)
    b = _matrix(sample_b, spec.dimension)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InputError("samples must be non-empty")
    if a.shape[1] != b.shape[1] or a.shape[1] != spec.dimension:
        raise InputError("samples must share the kernel dimension")
    s = spec.bandwidth
    kaa = _ordered_mean(kernel_matrix(a, a, s))
    kbb = _ordered_mean(kernel_matrix(b, b, s))
    kab = _ordered_mean(kernel_matrix(a, b, s))
    return max(kaa + kbb - 2.0 * kab, 0.0)
