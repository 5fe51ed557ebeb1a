"""Cohort pipeline: shared dictionary, per-subject weights, ODE smoothing, arm trajectories."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FittedModel, InputError, WeightTable
from .inference import ArmTrajectories
from .mmd_fit import FitConfig, fit_snapshots, weights_for_dictionary
from .ode_smooth import OdeConfig, predict_weights, train_many

DICTIONARY_MODES = ("pooled", "per-subject")
REFERENCES = ("first", "all")
TRAJECTORY_COLUMNS = ("arm", "subject_id", "time_index", "time", "component", "weight")


@dataclass(frozen=True)
class CohortConfig:
    dictionary_mode: str = "pooled"
    reference: str = "first"
    # The reference sample is subsampled to at most this many points.
    max_reference_points: int = 20000
    inference_points: int = 21

    def __post_init__(self):
        if self.dictionary_mode not in DICTIONARY_MODES:
            raise InputError(f"dictionary_mode must be one of {DICTIONARY_MODES}")
        if self.reference not in REFERENCES:
            raise InputError(f"reference must be one of {REFERENCES}")
        if self.max_reference_points < 2 or self.inference_points < 2:
            raise InputError("max_reference_points and inference_points must be >= 2")


@dataclass
class CohortFit:
    models: dict  # subject id -> FittedModel with its ODE attached
    arms: dict
    times: np.ndarray
    trajectories: dict  # subject id -> (m, K) array
    objective_trace: list
    ode_losses: dict  # subject id -> loss trace

    def arm_trajectories(self) -> dict:
        out = {}
        for label in sorted(set(self.arms.values())):
            ids = [s for s in self.models if self.arms[s] == label]
            out[label] = ArmTrajectories(label, self.times,
                                         np.stack([self.trajectories[s] for s in ids]),
                                         tuple(ids))
        return out


def reference_sample(datasets: dict, reference: str = "first", max_points: int = 20000,
                     seed: int = 0) -> np.ndarray:
    """Pooled first-window (or all-window) observations across subjects."""
    if not datasets:
        raise InputError("no subject datasets to pool")
    if reference == "first":
        blocks = [ds.snapshots[0] for ds in datasets.values()]
    elif reference == "all":
        blocks = [b for ds in datasets.values() for b in ds.snapshots]
    else:
        raise InputError(f"reference must be one of {REFERENCES}")
    pooled = np.concatenate(blocks, axis=0)
    if pooled.shape[0] > max_points:
        rng = np.random.default_rng([seed, 1])
        pooled = pooled[np.sort(rng.choice(pooled.shape[0], size=max_points, replace=False))]
    return pooled


def fit_cohort(datasets: dict, arms: dict, fit_config: FitConfig = FitConfig(),
               ode_config: OdeConfig = OdeConfig(),
               config: CohortConfig = CohortConfig()) -> CohortFit:
    """Fit every subject against a common dictionary and smooth with ODEs.

    In ``pooled`` mode the dictionary is estimated once on the reference
    sample and then frozen; only the per-window QP weights vary by subject.
    In ``per-subject`` mode each subject receives its own alternating fit, so
    component labels are not aligned across subjects.
    """
    if set(datasets) != set(arms):
        raise InputError("datasets and arms must cover the same subjects")
    dims = {ds.dimension for ds in datasets.values()}
    if len(dims) != 1:
        raise InputError("subjects disagree on dimension")
    models: dict[str, FittedModel] = {}
    trace: list = []
    if config.dictionary_mode == "pooled":
        ref = reference_sample(datasets, config.reference, config.max_reference_points,
                               fit_config.seed)
        dictionary, _, _, trace, _ = fit_snapshots([ref], fit_config)
        for sid, ds in datasets.items():
            models[sid] = weights_for_dictionary(dictionary, ds, fit_config.ridge_vector(),
                                                 fit_config.max_pairwise_points, fit_config.seed)
    else:
        for sid, ds in datasets.items():
            dictionary, rows, bw, tr, _ = fit_snapshots(list(ds.snapshots), fit_config)
            models[sid] = FittedModel(dictionary, WeightTable(ds.grid, rows), bw,
                                      fit_config.ridge_vector(), ds.time_unit)
            trace.append(tr)
    ids = list(models)
    results = train_many([models[s].weight_table for s in ids], ode_config)
    times = np.linspace(0.0, ode_config.T, config.inference_points)
    trajectories, losses = {}, {}
    for sid, res in zip(ids, results):
        m = models[sid]
        models[sid] = FittedModel(m.dictionary, m.weight_table, m.bandwidths, m.ridge,
                                  m.time_unit, res.model)
        trajectories[sid] = predict_weights(res.model, times)
        losses[sid] = res.loss_trace
    return CohortFit(models, dict(arms), times, trajectories, trace, losses)


def write_trajectories_csv(fit: CohortFit, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for sid, traj in fit.trajectories.items():
            for j, t in enumerate(fit.times):
                for k in range(traj.shape[1]):
                    w.writerow([fit.arms[sid], sid, j, repr(float(t)), k,
                                repr(float(traj[j, k]))])
    return path


def read_trajectories_csv(path) -> dict:
    """Arm label -> ArmTrajectories from a cohort trajectories CSV."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRAJECTORY_COLUMNS:
            raise InputError(f"{path}: expected header {','.join(TRAJECTORY_COLUMNS)}")
        data: dict = {}
        times: dict = {}
        for line, row in enumerate(reader, start=2):
            try:
                j, k = int(row["time_index"]), int(row["component"])
                t, wgt = float(row["time"]), float(row["weight"])
            except (TypeError, ValueError):
                raise InputError(f"{path}: malformed row {line}") from None
            key = (row["arm"], row["subject_id"])
            data.setdefault(key, {})[(j, k)] = wgt
            times.setdefault(key, {})[j] = t
    if not data:
        raise InputError(f"{path}: no trajectory rows")
    arms: dict = {}
    for (arm, sid), cells in data.items():
        m = max(j for j, _ in cells) + 1
        K = max(k for _, k in cells) + 1
        if len(cells) != m * K:
            raise InputError(f"{path}: subject {sid!r} has an incomplete (time, component) table")
        arr = np.zeros((m, K))
        for (j, k), v in cells.items():
            arr[j, k] = v
        ts = np.array([times[(arm, sid)][j] for j in range(m)])
        arms.setdefault(arm, []).append((sid, ts, arr))
    out = {}
    for arm, items in arms.items():
        ts0 = items[0][1]
        shapes = {a.shape for _, _, a in items}
        if len(shapes) != 1 or any(not np.array_equal(ts, ts0) for _, ts, _ in items):
            raise InputError(f"{path}: subjects of arm {arm!r} use different grids or K")
        out[arm] = ArmTrajectories(arm, ts0, np.stack([a for _, _, a in items]),
                                   tuple(s for s, _, _ in items))
    return out

