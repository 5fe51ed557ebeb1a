"""CGM ingestion: CSV parsing, finite-difference rates and windowing into snapshots."""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import InputError, SnapshotDataset, TimeGrid, dataset_to_dict

CGM_COLUMNS = ("subject_id", "arm", "timestamp_minutes", "glucose_mgdl")
MODES = ("univariate", "bivariate")
MINUTES_PER_DAY = 24 * 60


class SchemaError(InputError):
    """CSV header does not match the expected columns."""


class DataError(InputError):
    """A data row violates the series invariants."""

    def __init__(self, message: str, subject: str | None = None, row: int | None = None):
        super().__init__(message)
        self.subject = subject
        self.row = row


@dataclass(frozen=True)
class CgmSeries:
    subject_id: str
    arm: str
    timestamps: np.ndarray
    glucose: np.ndarray

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=float).reshape(-1)
        g = np.array(self.glucose, dtype=float).reshape(-1)
        if ts.shape != g.shape:
            raise DataError("timestamps and glucose differ in length", self.subject_id)
        if ts.size == 0:
            raise DataError("empty series", self.subject_id)
        if not (np.all(np.isfinite(ts)) and np.all(np.isfinite(g))):
            raise DataError("non-finite timestamp or glucose", self.subject_id)
        if np.any(g <= 0):
            raise DataError("glucose readings must be > 0", self.subject_id)
        if np.any(np.diff(ts) <= 0):
            raise DataError("timestamps must be strictly increasing", self.subject_id)
        ts.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "subject_id", str(self.subject_id))
        object.__setattr__(self, "arm", str(self.arm))
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "glucose", g)

    def __len__(self) -> int:
        return self.timestamps.size

    def __eq__(self, other):
        if not isinstance(other, CgmSeries):
            return NotImplemented
        return (self.subject_id == other.subject_id and self.arm == other.arm
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.glucose, other.glucose))

    __hash__ = None


@dataclass(frozen=True)
class WindowSpec:
    window_days: float = 7.0
    interval: float = 5.0  # minutes between nominal readings
    max_gap: float = 3.0  # multiples of ``interval``
    min_count: int = 50

    def __post_init__(self):
        for name in ("window_days", "interval", "max_gap"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InputError(f"{name} must be a positive number")
        if int(self.min_count) != self.min_count or self.min_count < 1:
            raise InputError("min_count must be a positive integer")

    @property
    def window_minutes(self) -> float:
        return self.window_days * MINUTES_PER_DAY


# ---------------------------------------------------------------------------
# CSV

def parse_cgm_csv(path) -> list[CgmSeries]:
    """Read a cohort CSV with header ``subject_id,arm,timestamp_minutes,glucose_mgdl``.

    Subjects appear in order of first occurrence; rows of one subject may be
    interleaved with others but must have strictly increasing timestamps.
    Row numbers in errors are file line numbers (the header is line 1).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in CGM_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        col = {c: header.index(c) for c in CGM_COLUMNS}
        data: dict[str, dict] = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {line}: expected {len(header)} fields, got {len(row)}",
                                row=line)
            sid = row[col["subject_id"]].strip()
            arm = row[col["arm"]].strip()
            try:
                ts = float(row[col["timestamp_minutes"]])
                g = float(row[col["glucose_mgdl"]])
            except ValueError:
                raise DataError(f"subject {sid!r}, row {line}: non-numeric value",
                                sid, line) from None
            if not (math.isfinite(ts) and math.isfinite(g)) or g <= 0:
                raise DataError(f"subject {sid!r}, row {line}: invalid reading", sid, line)
            rec = data.setdefault(sid, {"arm": arm, "ts": [], "g": []})
            if rec["arm"] != arm:
                raise DataError(f"subject {sid!r}, row {line}: arm changes from "
                                f"{rec['arm']!r} to {arm!r}", sid, line)
            if rec["ts"]:
                prev = rec["ts"][-1]
                if ts == prev:
                    raise DataError(f"subject {sid!r}, row {line}: duplicate timestamp {ts}",
                                    sid, line)
                if ts < prev:
                    raise DataError(f"subject {sid!r}, row {line}: timestamp {ts} precedes "
                                    f"{prev}", sid, line)
            rec["ts"].append(ts)
            rec["g"].append(g)
    return [CgmSeries(sid, r["arm"], r["ts"], r["g"]) for sid, r in data.items()]


def write_cgm_csv(series, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CGM_COLUMNS)
        for s in series:
            for t, g in zip(s.timestamps, s.glucose):
                w.writerow([s.subject_id, s.arm, repr(float(t)), repr(float(g))])
    return path


# ---------------------------------------------------------------------------
# rates and windows

@dataclass(frozen=True)
class RatePairs:
    """(G, V) pairs with V attached to the right endpoint of each difference."""

    timestamps: np.ndarray
    glucose: np.ndarray
    rate: np.ndarray
    dropped: int

    @property
    def size(self) -> int:
        return self.rate.size


def rate_of_change(series: CgmSeries, spec: WindowSpec = WindowSpec()) -> RatePairs:
    """Finite differences over consecutive readings no further apart than
    ``max_gap * interval`` minutes, in mg/dL per minute.
    """
    if len(series) < 2:
        raise InputError(f"subject {series.subject_id!r}: need at least 2 readings")
    ts, g = series.timestamps, series.glucose
    gaps = np.diff(ts)
    ok = gaps <= spec.max_gap * spec.interval * (1 + 1e-12)
    rate = np.diff(g)[ok] / gaps[ok]
    return RatePairs(ts[1:][ok], g[1:][ok], rate, int(np.count_nonzero(~ok)))


@dataclass
class SubjectReport:
    subject_id: str
    arm: str
    raw_pairs: int
    dropped_pairs: int
    windows: int = 0
    kept_pairs: int = 0
    excluded_pairs: int = 0
    window_counts: list = field(default_factory=list)
    excluded_windows: list = field(default_factory=list)
    window_midpoints: list = field(default_factory=list)
    status: str = "ok"

    def audit(self) -> bool:
        return self.kept_pairs + self.dropped_pairs + self.excluded_pairs == self.raw_pairs

    def manifest_entry(self) -> dict:
        return {
            "id": self.subject_id, "arm": self.arm, "windows": self.windows,
            "dropped_pairs": self.dropped_pairs, "excluded_pairs": self.excluded_pairs,
            "kept_pairs": self.kept_pairs, "raw_pairs": self.raw_pairs,
            "excluded_windows": self.excluded_windows,
            "window_midpoints_minutes": self.window_midpoints, "status": self.status,
        }


@dataclass
class CohortDatasets:
    mode: str
    spec: WindowSpec
    datasets: dict
    arms: dict
    reports: list

    def audit(self) -> bool:
        return all(r.audit() for r in self.reports)

    def manifest(self) -> dict:
        return {
            "mode": self.mode,
            "window_days": self.spec.window_days, "interval": self.spec.interval,
            "max_gap": self.spec.max_gap, "min_count": self.spec.min_count,
            "subjects": [r.manifest_entry() for r in self.reports],
        }


def _window_subject(series: CgmSeries, spec: WindowSpec, mode: str):
    raw = len(series) - 1
    if raw < 1:
        rep = SubjectReport(series.subject_id, series.arm, 0, 0, status="excluded: fewer than 2 readings")
        return None, rep
    pairs = rate_of_change(series, spec)
    rep = SubjectReport(series.subject_id, series.arm, raw, pairs.dropped)
    L = spec.window_minutes
    t0 = series.timestamps[0]
    # Window w covers (t0 + w L, t0 + (w + 1) L]; the first reading's own
    # timestamp carries no pair, so every pair lands in a window w >= 0.
    idx = np.maximum(np.ceil((pairs.timestamps - t0) / L) - 1, 0).astype(int)
    values = (pairs.glucose[:, None] if mode == "univariate"
              else np.column_stack([pairs.glucose, pairs.rate]))
    blocks, mids = [], []
    for w in np.unique(idx):
        sel = idx == w
        count = int(np.count_nonzero(sel))
        if count < spec.min_count:
            rep.excluded_windows.append(int(w))
            rep.excluded_pairs += count
            continue
        blocks.append(values[sel])
        mids.append(t0 + (w + 0.5) * L)
        rep.window_counts.append(count)
    if len(blocks) < 2:
        rep.status = f"excluded: {len(blocks)} valid window(s), need 2"
        rep.excluded_pairs += sum(rep.window_counts)
        rep.window_counts = []
        return None, rep
    mids = np.array(mids)
    grid = TimeGrid((mids - mids[0]) / (mids[-1] - mids[0]), 1.0)
    rep.windows = len(blocks)
    rep.kept_pairs = sum(rep.window_counts)
    rep.window_midpoints = [float(m) for m in mids]
    return SnapshotDataset(grid, tuple(blocks), "normalized"), rep


def windowize(series_list, spec: WindowSpec = WindowSpec(), mode: str = "bivariate") -> CohortDatasets:
    """Per-subject snapshot datasets, one snapshot per kept window.

    Normalized time maps the first and last kept window midpoints to 0 and 1.
    Windows with fewer than ``min_count`` pairs are excluded, and subjects
    with fewer than two kept windows are excluded with a report entry.
    """
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}")
    datasets, arms, reports = {}, {}, []
    seen = set()
    for s in series_list:
        if s.subject_id in seen:
            raise DataError(f"duplicate subject {s.subject_id!r}", s.subject_id)
        seen.add(s.subject_id)
        ds, rep = _window_subject(s, spec, mode)
        reports.append(rep)
        if ds is not None:
            datasets[s.subject_id] = ds
            arms[s.subject_id] = s.arm
    return CohortDatasets(mode, spec, datasets, arms, reports)


def _safe_name(sid: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", sid) or "_"


def write_cohort(cohort: CohortDatasets, out_dir) -> Path:
    """Write ``manifest.json`` and ``datasets/<subject>.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "datasets").mkdir(parents=True, exist_ok=True)
    manifest = cohort.manifest()
    for entry in manifest["subjects"]:
        sid = entry["id"]
        if sid in cohort.datasets:
            fname = f"datasets/{_safe_name(sid)}.json"
            doc = dataset_to_dict(cohort.datasets[sid])
            doc.update({"subject_id": sid, "arm": cohort.arms[sid]})
            (out / fname).write_text(json.dumps(doc))
            entry["dataset"] = fname
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out / "manifest.json"


def read_cohort(manifest_path):
    """Load (datasets, arms, manifest) written by ``write_cohort``."""
    from .core import dataset_from_dict

    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    datasets, arms = {}, {}
    for entry in manifest.get("subjects", []):
        if "dataset" not in entry:
            continue
        doc = json.loads((manifest_path.parent / entry["dataset"]).read_text())
        datasets[entry["id"]] = dataset_from_dict(doc)
        arms[entry["id"]] = entry["arm"]
    return datasets, arms, manifest


# ---------------------------------------------------------------------------
# synthetic cohorts for demos and tests

def synthetic_cohort(n_subjects: int = 6, weeks: float = 4.0, seed: int = 0,
                     arms=("control", "treatment"), interval: float = 5.0,
                     effect: float = 0.0) -> list[CgmSeries]:
    """Smooth daily glucose cycles with noise; ``effect`` lowers the treated
    arm's mean level linearly over the follow-up (mg/dL at the end).
    """
    rng = np.random.default_rng(seed)
    n = int(round(weeks * 7 * MINUTES_PER_DAY / interval))
    ts = np.arange(n) * interval
    out = []
    for i in range(n_subjects):
        arm = arms[i % len(arms)]
        base = rng.uniform(120, 160)
        amp = rng.uniform(15, 35)
        phase = rng.uniform(0, 2 * np.pi)
        drift = -effect * ts / ts[-1] if arm == arms[-1] else 0.0
        daily = amp * np.sin(2 * np.pi * ts / MINUTES_PER_DAY + phase)
        noise = np.cumsum(rng.normal(0, 2.0, n)) * 0.05 + rng.normal(0, 4.0, n)
        g = np.clip(base + daily + drift + noise, 40, 400)
        out.append(CgmSeries(f"S{i:03d}", arm, ts, g))
    return out
