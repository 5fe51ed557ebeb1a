"""Continuous-time mixture weights from a neural ODE.

The latent state z(t) in R^K follows dz/dt = v(z, t) with v a tanh MLP whose
input is (z, t). Weights are alpha(t) = z_+ / <1, z_+> (or softmax(z) in logit
mode). Training backpropagates through the unrolled fixed-step RK4 solve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .core import InputError, NumericalError, SimplexVector, WeightTable

jax.config.update("jax_enable_x64", True)

POSITIVE = "positive"
SOFTMAX = "softmax"
MODES = (POSITIVE, SOFTMAX)
POSITIVE_EPS = 1e-8
SOFTMAX_EPS = 1e-6


@dataclass(frozen=True)
class OdeConfig:
    hidden: tuple = (64, 64)
    T: float = 1.0
    h: float = 0.01
    mode: str = POSITIVE
    nu: float = 1e-10
    learning_rate: float = 1e-3
    epochs: int = 2000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}")
        if not (self.T > 0 and self.h > 0):
            raise InputError("T and h must be > 0")
        _check_divides(self.T, self.h)
        if self.epochs < 1 or not self.learning_rate > 0 or self.nu < 0:
            raise InputError("epochs >= 1, learning_rate > 0 and nu >= 0 are required")


def _check_divides(T: float, h: float) -> int:
    n = int(round(T / h))
    if n < 1 or abs(n * h - T) > 1e-12:
        raise InputError(f"step size {h} does not divide the horizon {T}")
    return n


@dataclass(frozen=True)
class OdeWeightModel:
    widths: tuple
    params: tuple  # ((W, b), ...) with W of shape (fan_in, fan_out)
    z0: np.ndarray
    T: float = 1.0
    h: float = 0.01
    mode: str = POSITIVE
    nu: float = 1e-10
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        params = tuple((np.array(W, dtype=float), np.array(b, dtype=float))
                       for W, b in self.params)
        for W, b in params:
            W.setflags(write=False)
            b.setflags(write=False)
        if len(params) != len(widths) - 1:
            raise InputError("need one (W, b) pair per layer")
        for (W, b), fin, fout in zip(params, widths[:-1], widths[1:]):
            if W.shape != (fin, fout) or b.shape != (fout,):
                raise InputError("parameter shapes do not match the layer widths")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise InputError("parameters must be finite")
        K = widths[-1]
        if widths[0] != K + 1:
            raise InputError("input width must be K + 1 (state plus time)")
        z0 = np.array(self.z0, dtype=float).ravel()
        if z0.size != K:
            raise InputError("initial state must have length K")
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}")
        if self.activation != "tanh":
            raise InputError("only tanh activation is supported")
        _check_divides(self.T, self.h)
        to_simplex(z0, self.mode)
        z0.setflags(write=False)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "z0", z0)

    @property
    def K(self) -> int:
        return self.widths[-1]

    @property
    def n_steps(self) -> int:
        return _check_divides(self.T, self.h)

    def field(self, z, t):
        """Vector field v(z, t) evaluated with numpy."""
        return _mlp(self.params, np.asarray(z, dtype=float), float(t), np)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "T": self.T,
            "h": self.h,
            "widths": list(self.widths),
            "activation": self.activation,
            "ridge": self.nu,
            "z0": self.z0.tolist(),
            "parameters": [{"weight": W.tolist(), "bias": b.tolist()} for W, b in self.params],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OdeWeightModel":
        params = tuple((np.array(p["weight"], dtype=float), np.array(p["bias"], dtype=float))
                       for p in doc["parameters"])
        return cls(tuple(doc["widths"]), params, np.array(doc["z0"], dtype=float),
                   float(doc["T"]), float(doc["h"]), str(doc["mode"]),
                   float(doc.get("ridge", 1e-10)), str(doc.get("activation", "tanh")))


# ---------------------------------------------------------------------------
# shared numerics (numpy or jax.numpy via ``xp``)

def _mlp(params, z, t, xp):
    x = xp.concatenate([z, xp.reshape(xp.asarray(t, dtype=z.dtype), (1,))])
    last = len(params) - 1
    for i, (W, b) in enumerate(params):
        x = x @ W + b
        if i < last:
            x = xp.tanh(x)
    return x


def rk4_step(field: Callable, z, t, dt):
    k1 = field(z, t)
    k2 = field(z + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = field(z + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = field(z + dt * k3, t + dt)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _schedule(t: float, h: float, n_max: int) -> tuple[int, float]:
    """Number of full steps of size h before ``t`` and the leftover partial step."""
    n = min(int(math.floor(t / h + 1e-9)), n_max)
    rem = max(t - n * h, 0.0)
    return n, rem


def integrate_field(field: Callable, z0, t_target: float, h: float):
    """Classic RK4 from 0 to ``t_target`` with fixed step h and a final partial step."""
    if t_target < 0:
        raise InputError("t_target must be >= 0")
    z = np.array(z0, dtype=float)
    n, rem = _schedule(t_target, h, int(math.floor(t_target / h + 1e-9)))
    for i in range(n):
        z = rk4_step(field, z, i * h, h)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite state after RK4 step {i + 1}")
    if rem > 0:
        z = rk4_step(field, z, n * h, rem)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite state in the final partial step {n + 1}")
    return z


def _simplex_np(z: np.ndarray, mode: str) -> np.ndarray:
    if mode == SOFTMAX:
        e = np.exp(z - z.max())
        return e / e.sum()
    zp = np.maximum(z, 0.0)
    if zp.sum() <= 0:
        zp = zp + POSITIVE_EPS
    return zp / zp.sum()


def _simplex_jax(z, mode: str):
    if mode == SOFTMAX:
        return jax.nn.softmax(z, axis=-1)
    zp = jnp.maximum(z, 0.0)
    s = jnp.sum(zp, axis=-1, keepdims=True)
    zp = jnp.where(s > 0, zp, zp + POSITIVE_EPS)
    return zp / jnp.sum(zp, axis=-1, keepdims=True)


def to_simplex(z, mode: str = POSITIVE) -> SimplexVector:
    z = np.asarray(z, dtype=float).ravel()
    if not np.all(np.isfinite(z)):
        raise InputError("state must be finite")
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}")
    return SimplexVector(_simplex_np(z, mode))


def init_from_weights(alpha0, mode: str = POSITIVE) -> np.ndarray:
    a = np.asarray(alpha0.weights if isinstance(alpha0, SimplexVector) else alpha0,
                   dtype=float)
    a = SimplexVector(a).weights
    if mode == POSITIVE:
        return np.array(a)
    smoothed = (a + SOFTMAX_EPS) / (1.0 + a.size * SOFTMAX_EPS)
    return np.log(smoothed)


# ---------------------------------------------------------------------------
# jax paths

def _trajectory(params, z0, n_steps: int, h: float):
    field = lambda z, t: _mlp(params, z, t, jnp)

    def body(z, i):
        z_next = rk4_step(field, z, i * h, h)
        return z_next, z_next

    _, zs = jax.lax.scan(body, z0, jnp.arange(n_steps, dtype=z0.dtype))
    return jnp.concatenate([z0[None], zs], axis=0)


def _states_at(params, z0, idx, rem, n_steps: int, h: float):
    traj = _trajectory(params, z0, n_steps, h)
    field = lambda z, t: _mlp(params, z, t, jnp)
    base = traj[idx]
    return jax.vmap(lambda z, i, r: rk4_step(field, z, i * h, r))(base, idx.astype(z0.dtype), rem)


@partial(jax.jit, static_argnames=("n_steps", "h", "mode"))
def _predict(params, z0, idx, rem, n_steps, h, mode):
    z = _states_at(params, z0, idx, rem, n_steps, h)
    return z, _simplex_jax(z, mode)


def _loss(params, z0, idx, rem, targets, mask, nu, n_steps, h, mode):
    z = _states_at(params, z0, idx, rem, n_steps, h)
    alpha = _simplex_jax(z, mode)
    fit = jnp.sum(mask[:, None] * (alpha - targets) ** 2)
    sq = sum(jnp.sum(W * W) + jnp.sum(b * b) for W, b in params)
    return fit + nu * sq


loss_and_grad = jax.jit(jax.value_and_grad(_loss), static_argnames=("n_steps", "h", "mode"))


@partial(jax.jit, static_argnames=("n_steps", "h", "mode", "epochs"))
def _train_batch(params, z0, idx, rem, targets, mask, nu, lr, n_steps, h, mode, epochs):
    vg = jax.vmap(jax.value_and_grad(_loss),
                  in_axes=(0, 0, 0, 0, 0, 0, None, None, None, None))
    b1, b2, eps = 0.9, 0.999, 1e-8
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    B = z0.shape[0]

    def epoch(carry, e):
        p, m, v, best_p, best_l, bad = carry
        loss, g = vg(p, z0, idx, rem, targets, mask, nu, n_steps, h, mode)
        finite = jnp.isfinite(loss)
        gfin = jax.tree_util.tree_reduce(
            lambda acc, x: acc & jnp.all(jnp.isfinite(x), axis=tuple(range(1, x.ndim))),
            g, jnp.ones(B, dtype=bool))
        ok = finite & gfin & (bad < 0)
        bad = jnp.where((bad < 0) & ~(finite & gfin), e, bad)
        improved = ok & (loss < best_l)
        sel = lambda new, old: jnp.where(
            improved.reshape((B,) + (1,) * (new.ndim - 1)), new, old)
        best_p = jax.tree_util.tree_map(sel, p, best_p)
        best_l = jnp.where(improved, loss, best_l)
        t = (e + 1).astype(jnp.float64)
        m = jax.tree_util.tree_map(lambda mm, gg: b1 * mm + (1 - b1) * gg, m, g)
        v = jax.tree_util.tree_map(lambda vv, gg: b2 * vv + (1 - b2) * gg * gg, v, g)

        def upd(pp, mm, vv):
            step = lr * (mm / (1 - b1 ** t)) / (jnp.sqrt(vv / (1 - b2 ** t)) + eps)
            keep = ok.reshape((B,) + (1,) * (pp.ndim - 1))
            return jnp.where(keep, pp - step, pp)

        p = jax.tree_util.tree_map(upd, p, m, v)
        return (p, m, v, best_p, best_l, bad), loss

    init = (params, zeros, zeros, params, jnp.full(B, jnp.inf), jnp.full(B, -1))
    (p, _, _, best_p, best_l, bad), trace = jax.lax.scan(
        epoch, init, jnp.arange(epochs))
    # Score the final iterate too; it may beat every recorded loss.
    final_l = jax.vmap(_loss, in_axes=(0, 0, 0, 0, 0, 0, None, None, None, None))(
        p, z0, idx, rem, targets, mask, nu, n_steps, h, mode)
    better = jnp.isfinite(final_l) & (final_l < best_l) & (bad < 0)
    best_p = jax.tree_util.tree_map(
        lambda new, old: jnp.where(better.reshape((B,) + (1,) * (new.ndim - 1)), new, old),
        p, best_p)
    best_l = jnp.where(better, final_l, best_l)
    return best_p, best_l, trace, bad


# ---------------------------------------------------------------------------
# public API

def init_params(widths: Sequence[int], rng: np.random.Generator) -> tuple:
    params = []
    for fin, fout in zip(widths[:-1], widths[1:]):
        lim = 1.0 / math.sqrt(fin)
        params.append((rng.uniform(-lim, lim, size=(fin, fout)), np.zeros(fout)))
    return tuple(params)


def _query(times, T: float, h: float, n_steps: int):
    idx, rem = [], []
    for t in times:
        t = float(t)
        if t < -1e-12 or t > T + 1e-12:
            raise InputError(f"time {t} outside [0, {T}] (no extrapolation)")
        n, r = _schedule(min(max(t, 0.0), T), h, n_steps)
        idx.append(n)
        rem.append(r)
    return np.array(idx, dtype=np.int64), np.array(rem, dtype=float)


def _jax_params(params):
    return tuple((jnp.asarray(W), jnp.asarray(b)) for W, b in params)


def rk4_integrate(model: OdeWeightModel, t_target):
    """Latent state z at ``t_target`` (scalar or sequence) under the model's field."""
    scalar = np.ndim(t_target) == 0
    times = np.atleast_1d(np.asarray(t_target, dtype=float))
    idx, rem = _query(times, model.T, model.h, model.n_steps)
    z, _ = _predict(_jax_params(model.params), jnp.asarray(model.z0), jnp.asarray(idx),
                    jnp.asarray(rem), model.n_steps, model.h, model.mode)
    z = np.asarray(z)
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite state during integration")
    return z[0] if scalar else z


def predict_weights(model: OdeWeightModel, times) -> np.ndarray:
    """alpha(t) for each time in ``times``, as an (n, K) array of simplex rows."""
    z = np.atleast_2d(rk4_integrate(model, np.atleast_1d(np.asarray(times, dtype=float))))
    return np.stack([_simplex_np(row, model.mode) for row in z])


def predict_simplex(model: OdeWeightModel, times) -> list:
    return [SimplexVector(r) for r in predict_weights(model, times)]


@dataclass
class TrainResult:
    model: OdeWeightModel
    best_loss: float
    loss_trace: np.ndarray


def _table_times(table: WeightTable, T: float) -> np.ndarray:
    return table.grid.normalized * T


def training_data(tables: Sequence[WeightTable], config: OdeConfig):
    n_steps = _check_divides(config.T, config.h)
    M = max(len(t.grid) for t in tables)
    K = tables[0].size
    B = len(tables)
    idx = np.zeros((B, M), dtype=np.int64)
    rem = np.zeros((B, M))
    targets = np.zeros((B, M, K))
    mask = np.zeros((B, M))
    z0 = np.zeros((B, K))
    for b, table in enumerate(tables):
        if table.size != K:
            raise InputError("all weight tables must share K")
        m = len(table.grid)
        i, r = _query(_table_times(table, config.T), config.T, config.h, n_steps)
        idx[b, :m], rem[b, :m] = i, r
        targets[b, :m] = table.rows
        mask[b, :m] = 1.0
        z0[b] = init_from_weights(table.rows[0], config.mode)
    return idx, rem, targets, mask, z0, n_steps


def train_many(tables: Sequence[WeightTable], config: OdeConfig = OdeConfig()) -> list:
    """Train one ODE per weight table in a single batched run.

    Each table gets its own parameter initialization drawn from
    ``(config.seed, position)``, so results do not depend on batch composition
    beyond order.
    """
    if not tables:
        return []
    idx, rem, targets, mask, z0, n_steps = training_data(tables, config)
    K = targets.shape[2]
    widths = (K + 1,) + config.hidden + (K,)
    inits = [init_params(widths, np.random.default_rng([config.seed, b]))
             for b in range(len(tables))]
    stacked = tuple((jnp.asarray(np.stack([p[l][0] for p in inits])),
                     jnp.asarray(np.stack([p[l][1] for p in inits])))
                    for l in range(len(widths) - 1))
    best_p, best_l, trace, bad = _train_batch(
        stacked, jnp.asarray(z0), jnp.asarray(idx), jnp.asarray(rem), jnp.asarray(targets),
        jnp.asarray(mask), jnp.asarray(config.nu), jnp.asarray(config.learning_rate),
        n_steps, config.h, config.mode, config.epochs)
    bad = np.asarray(bad)
    if np.any(bad >= 0):
        b = int(np.flatnonzero(bad >= 0)[0])
        raise NumericalError(f"non-finite training loss at epoch {int(bad[b])} (table {b})")
    trace = np.asarray(trace)
    results = []
    for b in range(len(tables)):
        params = tuple((np.asarray(W[b]), np.asarray(bb[b])) for W, bb in best_p)
        model = OdeWeightModel(widths, params, z0[b], config.T, config.h, config.mode,
                               config.nu)
        results.append(TrainResult(model, float(best_l[b]), trace[:, b].copy()))
    return results


def train(table: WeightTable, config: OdeConfig = OdeConfig()) -> TrainResult:
    """Fit the vector field to a discrete weight table by Adam on the ridge loss."""
    return train_many([table], config)[0]


def training_loss(model_or_params, table: WeightTable, config: OdeConfig,
                  with_grad: bool = False):
    """Loss (and gradient as a params-shaped tuple) for a single table."""
    params = model_or_params.params if isinstance(model_or_params, OdeWeightModel) \
        else model_or_params
    idx, rem, targets, mask, z0, n_steps = training_data([table], config)
    args = (jnp.asarray(z0[0]), jnp.asarray(idx[0]), jnp.asarray(rem[0]),
            jnp.asarray(targets[0]), jnp.asarray(mask[0]), config.nu)
    if with_grad:
        val, g = loss_and_grad(_jax_params(params), *args, n_steps=n_steps, h=config.h,
                               mode=config.mode)
        return float(val), tuple((np.asarray(W), np.asarray(b)) for W, b in g)
    return float(_loss(_jax_params(params), *args, n_steps, config.h, config.mode))
