"""Domain types shared across the package, plus model (de)serialization.

All types are frozen dataclasses over read-only numpy arrays, so instances can
be shared freely once constructed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
from scipy.stats import norm

SIMPLEX_TOL = 1e-9
CLAMP_TOL = 1e-12


class InputError(ValueError):
    """Invalid user input (shapes, ranges, missing fields)."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-finite values, broken factorization)."""


class ParseError(InputError):
    """Malformed serialized input; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    points: np.ndarray
    horizon: float

    def __post_init__(self):
        pts = _frozen(self.points).ravel()
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "horizon", float(self.horizon))
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise InputError("time grid horizon must be finite and > 0")
        if pts.size < 2:
            raise InputError("time grid needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise InputError("time grid points must be finite")
        if np.any(np.diff(pts) <= 0):
            raise InputError("time grid points must be strictly increasing")
        if pts[0] < 0 or pts[-1] > self.horizon:
            raise InputError("time grid points must lie in [0, horizon]")

    def __len__(self) -> int:
        return self.points.size

    @property
    def normalized(self) -> np.ndarray:
        """Grid points rescaled to [0, 1]."""
        return self.points / self.horizon


@dataclass(frozen=True)
class SnapshotDataset:
    grid: TimeGrid
    snapshots: tuple
    time_unit: str = "normalized"

    def __post_init__(self):
        blocks = []
        for i, block in enumerate(self.snapshots):
            arr = np.asarray(block, dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
                raise InputError(f"snapshot {i} must be a non-empty N x d matrix")
            if not np.all(np.isfinite(arr)):
                raise InputError(f"snapshot {i} contains non-finite entries")
            blocks.append(_frozen(arr))
        if len(blocks) != len(self.grid):
            raise InputError(
                f"got {len(blocks)} snapshots for a grid of {len(self.grid)} points"
            )
        dims = {b.shape[1] for b in blocks}
        if len(dims) != 1:
            raise InputError(f"snapshots disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "snapshots", tuple(blocks))

    @property
    def dimension(self) -> int:
        return self.snapshots[0].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [b.shape[0] for b in self.snapshots]

    def pooled(self) -> np.ndarray:
        return np.concatenate(self.snapshots, axis=0)


@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    cholesky: np.ndarray

    def __post_init__(self):
        m = _frozen(self.mean).ravel()
        L = np.array(self.cholesky, dtype=float)
        if L.ndim != 2 or L.shape != (m.size, m.size):
            raise InputError("cholesky factor must be a d x d matrix matching the mean")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(L))):
            raise InputError("component parameters must be finite")
        if np.any(np.triu(L, 1) != 0):
            raise InputError("cholesky factor must be lower triangular")
        if np.any(np.diag(L) <= 0):
            raise InputError("cholesky diagonal entries must be > 0")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cholesky", _frozen(L))

    @classmethod
    def from_covariance(cls, mean, covariance) -> "GaussianComponent":
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        try:
            L = np.linalg.cholesky(0.5 * (cov + cov.T))
        except np.linalg.LinAlgError as exc:
            raise InputError("covariance is not positive definite") from exc
        return cls(np.atleast_1d(mean), L)

    @property
    def dimension(self) -> int:
        return self.mean.size

    @property
    def covariance(self) -> np.ndarray:
        S = self.cholesky @ self.cholesky.T
        return 0.5 * (S + S.T)


@dataclass(frozen=True)
class GaussianDictionary:
    """K Gaussian components shared across time; index s is the component label."""

    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        if len(comps) < 1:
            raise InputError("dictionary needs at least one component")
        if len({c.dimension for c in comps}) != 1:
            raise InputError("all components must share the same dimension")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "_means", _frozen([c.mean for c in comps]))
        object.__setattr__(self, "_chols", _frozen([c.cholesky for c in comps]))

    @classmethod
    def from_arrays(cls, means, cholesky) -> "GaussianDictionary":
        means = np.asarray(means, dtype=float)
        cholesky = np.asarray(cholesky, dtype=float)
        return cls(tuple(GaussianComponent(m, L) for m, L in zip(means, cholesky)))

    @classmethod
    def from_covariances(cls, means, covariances) -> "GaussianDictionary":
        return cls(tuple(GaussianComponent.from_covariance(m, S)
                         for m, S in zip(means, covariances)))

    @property
    def size(self) -> int:
        return len(self.components)

    @property
    def dimension(self) -> int:
        return self.components[0].dimension

    @property
    def means(self) -> np.ndarray:
        return self._means

    @property
    def cholesky(self) -> np.ndarray:
        return self._chols

    @property
    def covariances(self) -> np.ndarray:
        S = np.einsum("kij,klj->kil", self._chols, self._chols)
        return 0.5 * (S + np.swapaxes(S, 1, 2))


@dataclass(frozen=True)
class SimplexVector:
    """Probability vector. Entries below 1e-12 are clamped to 0, then renormalized."""

    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(project_to_simplex_checked(self.weights)))

    def __len__(self) -> int:
        return self.weights.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)


def project_to_simplex_checked(w) -> np.ndarray:
    """Validate ``w`` against the simplex tolerance and return the cleaned copy."""
    w = np.array(w, dtype=float).ravel()
    if w.size < 1 or not np.all(np.isfinite(w)):
        raise InputError("simplex vector must be non-empty and finite")
    if w.min() < -SIMPLEX_TOL:
        raise InputError(f"simplex entry {w.min():.3g} is negative")
    if abs(w.sum() - 1.0) > SIMPLEX_TOL:
        raise InputError(f"simplex entries sum to {w.sum():.15g}, not 1")
    small = w < CLAMP_TOL
    clamped = bool(np.any(w[small] != 0.0))
    w[small] = 0.0
    # Leave already-normalized input untouched so cleaning is idempotent.
    if not clamped and abs(w.sum() - 1.0) <= 1e-15:
        return w
    return w / w.sum()


@dataclass(frozen=True)
class WeightTable:
    grid: TimeGrid
    rows: np.ndarray

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if rows.shape[0] != len(self.grid):
            raise InputError(
                f"weight table has {rows.shape[0]} rows for {len(self.grid)} grid points"
            )
        clean = np.stack([project_to_simplex_checked(r) for r in rows])
        object.__setattr__(self, "rows", _frozen(clean))

    @property
    def size(self) -> int:
        return self.rows.shape[1]

    def row(self, i: int) -> SimplexVector:
        return SimplexVector(self.rows[i])


@dataclass(frozen=True)
class FittedModel:
    dictionary: GaussianDictionary
    weight_table: WeightTable
    bandwidths: np.ndarray
    ridge: np.ndarray
    time_unit: str = "normalized"
    ode: Optional[Any] = None

    def __post_init__(self):
        bw = _frozen(self.bandwidths).ravel()
        lam = _frozen(self.ridge).ravel()
        if bw.size != len(self.weight_table.grid):
            raise InputError("one bandwidth per grid point is required")
        if not np.all(np.isfinite(bw)) or np.any(bw <= 0):
            raise InputError("bandwidths must be finite and > 0")
        if lam.size != self.dictionary.size or np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise InputError("ridge must be a non-negative vector of length K")
        if self.weight_table.size != self.dictionary.size:
            raise InputError("weight table width differs from dictionary size")
        object.__setattr__(self, "bandwidths", bw)
        object.__setattr__(self, "ridge", lam)


# ---------------------------------------------------------------------------
# densities

def _as_points(x, d: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim <= 1 and (arr.size == d)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if single else arr.reshape(-1, 1)
    if arr.shape[-1] != d:
        raise InputError(f"point dimension {arr.shape[-1]} does not match d={d}")
    return arr, single


def gaussian_logpdf(x: np.ndarray, means: np.ndarray, chols: np.ndarray) -> np.ndarray:
    """log N(x_n | m_k, L_k L_k^T) for points (n, d) and components (K, d), (K, d, d)."""
    n, d = x.shape
    out = np.empty((n, means.shape[0]))
    for k, (m, L) in enumerate(zip(means, chols)):
        z = np.linalg.solve(L, (x - m).T)
        out[:, k] = (-0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L)))
                     - 0.5 * d * math.log(2 * math.pi))
    return out


def mixture_density(dictionary: GaussianDictionary, alpha, x):
    """Evaluate sum_s alpha_s N(x | m_s, Sigma_s).

    ``x`` may be a single point of length d (returns a float) or an (n, d) array.
    """
    w = np.asarray(alpha.weights if isinstance(alpha, SimplexVector) else alpha, dtype=float)
    if w.size != dictionary.size:
        raise InputError("weight vector length differs from dictionary size")
    pts, single = _as_points(x, dictionary.dimension)
    dens = np.exp(gaussian_logpdf(pts, dictionary.means, dictionary.cholesky)) @ w
    return float(dens[0]) if single else dens


def mixture_cdf_component(dictionary: GaussianDictionary, alpha, x, *,
                          n_samples: int = 200_000, seed: int = 0,
                          return_stderr: bool = False):
    """Component-wise CDF P(X <= x) of the mixture.

    Exact for d = 1; for d > 1 a Monte-Carlo estimate from ``n_samples`` draws.
    """
    w = np.asarray(alpha.weights if isinstance(alpha, SimplexVector) else alpha, dtype=float)
    d = dictionary.dimension
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    if xv.size != d:
        raise InputError(f"point dimension {xv.size} does not match d={d}")
    if d == 1:
        sd = dictionary.cholesky[:, 0, 0]
        val = float(np.clip(norm.cdf((xv[0] - dictionary.means[:, 0]) / sd) @ w, 0.0, 1.0))
        return (val, 0.0) if return_stderr else val
    rng = np.random.default_rng(seed)
    sample = sample_mixture(dictionary, w, n_samples, rng)
    hits = np.all(sample <= xv, axis=1)
    val = float(hits.mean())
    se = float(math.sqrt(max(val * (1 - val), 0.0) / n_samples))
    return (val, se) if return_stderr else val


def sample_mixture(dictionary: GaussianDictionary, alpha, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(alpha, dtype=float)
    labels = rng.choice(dictionary.size, size=n, p=w / w.sum())
    eps = rng.standard_normal((n, dictionary.dimension))
    return dictionary.means[labels] + np.einsum("nij,nj->ni", dictionary.cholesky[labels], eps)


# ---------------------------------------------------------------------------
# serialization

def _dictionary_to_json(dictionary: GaussianDictionary) -> list:
    return [{"mean": c.mean.tolist(), "cholesky": c.cholesky.tolist()}
            for c in dictionary.components]


def model_to_dict(model: FittedModel) -> dict:
    doc = {
        "dimension": model.dictionary.dimension,
        "K": model.dictionary.size,
        "components": _dictionary_to_json(model.dictionary),
        "grid": model.weight_table.grid.points.tolist(),
        "horizon": model.weight_table.grid.horizon,
        "weights": model.weight_table.rows.tolist(),
        "bandwidths": model.bandwidths.tolist(),
        "ridge": model.ridge.tolist(),
        "time_unit": model.time_unit,
    }
    if model.ode is not None:
        doc["ode"] = model.ode.to_dict()
    return doc


def serialize_model(model: FittedModel) -> bytes:
    """JSON bytes; floats use the shortest repr that round-trips exactly."""
    if model.weight_table.rows.shape[0] < 1:
        raise InputError("cannot serialize a model without grid points")
    return json.dumps(model_to_dict(model), indent=1, allow_nan=False).encode("utf-8")


def _require(doc: dict, key: str, path: str = ""):
    if not isinstance(doc, dict) or key not in doc:
        raise ParseError(f"{path}{key}", "missing field")
    return doc[key]


def _float_array(value, path: str, ndim: int) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(path, f"expected numeric array ({exc})") from None
    if arr.ndim != ndim:
        raise ParseError(path, f"expected {ndim}-d array, got {arr.ndim}-d")
    if not np.all(np.isfinite(arr)):
        raise ParseError(path, "non-finite value")
    return arr


def dictionary_from_json(items, path: str = "components") -> GaussianDictionary:
    if not isinstance(items, list) or not items:
        raise ParseError(path, "expected a non-empty list")
    comps = []
    for k, item in enumerate(items):
        p = f"{path}[{k}]"
        mean = _float_array(_require(item, "mean", p + "."), p + ".mean", 1)
        chol = _float_array(_require(item, "cholesky", p + "."), p + ".cholesky", 2)
        try:
            comps.append(GaussianComponent(mean, chol))
        except InputError as exc:
            raise ParseError(p, str(exc)) from None
    try:
        return GaussianDictionary(tuple(comps))
    except InputError as exc:
        raise ParseError(path, str(exc)) from None


def model_from_dict(doc: dict) -> FittedModel:
    if not isinstance(doc, dict):
        raise ParseError("$", "expected a JSON object")
    dictionary = dictionary_from_json(_require(doc, "components"))
    d = _require(doc, "dimension")
    K = _require(doc, "K")
    if d != dictionary.dimension:
        raise ParseError("dimension", f"{d} disagrees with components ({dictionary.dimension})")
    if K != dictionary.size:
        raise ParseError("K", f"{K} disagrees with component count ({dictionary.size})")
    grid_pts = _float_array(_require(doc, "grid"), "grid", 1)
    horizon = doc.get("horizon", float(grid_pts[-1]) if grid_pts.size else 1.0)
    try:
        grid = TimeGrid(grid_pts, horizon)
    except InputError as exc:
        raise ParseError("grid", str(exc)) from None
    weights = _float_array(_require(doc, "weights"), "weights", 2)
    try:
        table = WeightTable(grid, weights)
    except InputError as exc:
        raise ParseError("weights", str(exc)) from None
    bandwidths = _float_array(_require(doc, "bandwidths"), "bandwidths", 1)
    ridge = _float_array(_require(doc, "ridge"), "ridge", 1)
    ode = None
    if doc.get("ode") is not None:
        from .ode_smooth import OdeWeightModel
        try:
            ode = OdeWeightModel.from_dict(doc["ode"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError("ode", str(exc)) from None
    time_unit = doc.get("time_unit", "normalized")
    try:
        return FittedModel(dictionary, table, bandwidths, ridge, str(time_unit), ode)
    except InputError as exc:
        raise ParseError("$", str(exc)) from None


def deserialize_model(data) -> FittedModel:
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError("$", f"invalid JSON ({exc})") from None
    return model_from_dict(doc)


def dataset_to_dict(dataset: SnapshotDataset) -> dict:
    return {
        "dimension": dataset.dimension,
        "grid": dataset.grid.points.tolist(),
        "horizon": dataset.grid.horizon,
        "time_unit": dataset.time_unit,
        "snapshots": [b.tolist() for b in dataset.snapshots],
    }


def dataset_from_dict(doc: dict) -> SnapshotDataset:
    grid_pts = _float_array(_require(doc, "grid"), "grid", 1)
    try:
        grid = TimeGrid(grid_pts, _require(doc, "horizon"))
    except InputError as exc:
        raise ParseError("grid", str(exc)) from None
    snaps = _require(doc, "snapshots")
    if not isinstance(snaps, list):
        raise ParseError("snapshots", "expected a list")
    blocks = [_float_array(b, f"snapshots[{i}]", 2) for i, b in enumerate(snaps)]
    try:
        return SnapshotDataset(grid, tuple(blocks), str(doc.get("time_unit", "normalized")))
    except InputError as exc:
        raise ParseError("snapshots", str(exc)) from None


def models_equal(a: FittedModel, b: FittedModel) -> bool:
    """Bit-exact comparison of every field (ODE parameters included)."""
    def same(x, y):
        return np.array_equal(np.asarray(x), np.asarray(y))

    if not (same(a.dictionary.means, b.dictionary.means)
            and same(a.dictionary.cholesky, b.dictionary.cholesky)
            and same(a.weight_table.rows, b.weight_table.rows)
            and same(a.weight_table.grid.points, b.weight_table.grid.points)
            and a.weight_table.grid.horizon == b.weight_table.grid.horizon
            and same(a.bandwidths, b.bandwidths) and same(a.ridge, b.ridge)
            and a.time_unit == b.time_unit):
        return False
    if (a.ode is None) != (b.ode is None):
        return False
    return a.ode is None or a.ode.to_dict() == b.ode.to_dict()
