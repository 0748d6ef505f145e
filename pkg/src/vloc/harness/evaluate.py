"""Position-error evaluation of pose streams against ground truth."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ..errors import AlignmentMissingError
from ..localizer.stream import PoseRow, read_pose_csv
from .truth import GroundTruth, interpolate_marks

MODES = ("continuous", "intermittent")
REPORT_PERCENTILES = (50, 75, 90, 95, 99)
CDF_HEADER = ["error_m", "count", "fraction"]


def nearest_rank(values, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value (p=0 gives the minimum)."""
    v = np.sort(np.asarray(values, dtype=float))
    if not len(v):
        return math.nan
    if not 0 <= p <= 100:
        raise ValueError("percentile must be in [0, 100]")
    k = max(1, math.ceil(p / 100.0 * len(v)))
    return float(v[k - 1])


@dataclass
class ErrorReport:
    mode: str
    column: str
    frame_ids: np.ndarray   # frame (continuous) or mark-nearest frame (intermittent) of each sample
    errors: np.ndarray      # metres
    missing: int = 0        # truth samples with no estimate

    @property
    def count(self) -> int:
        return len(self.errors)

    @property
    def median(self) -> float:
        return self.percentile(50)

    def percentile(self, p: float) -> float:
        return nearest_rank(self.errors, p)

    @property
    def max(self) -> float:
        return float(self.errors.max()) if self.count else math.nan

    def fraction_above(self, threshold: float) -> float:
        return float(np.mean(self.errors > threshold)) if self.count else math.nan

    def cdf(self) -> np.ndarray:
        """Rows of (error, cumulative count, cumulative fraction) at each distinct error value."""
        if not self.count:
            return np.zeros((0, 3))
        v, c = np.unique(self.errors, return_counts=True)
        cum = np.cumsum(c)
        return np.column_stack([v, cum, cum / self.count])

    def summary(self) -> dict:
        out = {"mode": self.mode, "column": self.column, "count": self.count, "missing": self.missing,
               "median": self.median}
        for p in REPORT_PERCENTILES:
            out[f"p{p}"] = self.percentile(p)
        out["fraction_above_3m"] = self.fraction_above(3.0)
        out["max"] = self.max
        return out


def _column(row: PoseRow, column: str):
    return row.kf if column == "kf" else row.raw


def _interp_at(times: np.ndarray, values: np.ndarray, t: float, max_gap: float):
    """Linear interpolation between the estimates bracketing ``t``; None across a gap."""
    j = int(np.searchsorted(times, t))
    if j < len(times) and times[j] == t:
        return values[j]
    if j == 0 or j == len(times) or times[j] - times[j - 1] > max_gap:
        return None
    a = (t - times[j - 1]) / (times[j] - times[j - 1])
    return (1 - a) * values[j - 1] + a * values[j]


def evaluate_rows(rows: list[PoseRow], truth: GroundTruth, mode: str = "continuous",
                  column: str | None = None) -> ErrorReport:
    """Per-sample Euclidean position error.

    Continuous mode scores every frame (filtered column by default) against the
    per-frame truth, or against constant-pace interpolation between marks when
    the truth has no per-frame poses.  Intermittent mode scores only at marks
    (raw column by default), interpolating the estimate to each mark's time.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    column = column or ("kf" if mode == "continuous" else "raw")
    if column not in ("kf", "raw"):
        raise ValueError("column must be 'kf' or 'raw'")
    ids, errs, missing = [], [], 0

    if mode == "continuous":
        if truth.poses:
            lookup = {fid: truth.position(fid) for fid in truth.frame_ids}
        else:
            if len(truth.marks) < 2:
                raise ValueError("continuous mode needs per-frame truth or at least two marks")
            ts = np.array([r.timestamp for r in rows])
            pos = interpolate_marks([m.timestamp for m in truth.marks], [m.position for m in truth.marks], ts)
            lookup = {r.frame_id: p for r, p in zip(rows, pos)}
        seen = set()
        for r in rows:
            if r.frame_id not in lookup:
                continue
            seen.add(r.frame_id)
            est = _column(r, column)
            if est is None:
                missing += 1
                continue
            ids.append(r.frame_id)
            errs.append(float(np.linalg.norm(est[:3] - lookup[r.frame_id])))
        missing += sum(1 for fid in lookup if fid not in seen)
    else:
        have = [r for r in rows if _column(r, column) is not None]
        times = np.array([r.timestamp for r in have])
        vals = np.array([_column(r, column)[:3] for r in have]).reshape(-1, 3)
        all_t = np.array(sorted(r.timestamp for r in rows))
        frame_dt = float(np.median(np.diff(all_t))) if len(all_t) > 1 else 0.0
        for m in truth.marks:
            est = _interp_at(times, vals, m.timestamp, 1.5 * frame_dt) if len(times) else None
            if est is None:
                missing += 1
                continue
            ids.append(m.frame_id)
            errs.append(float(np.linalg.norm(est - m.position)))
    return ErrorReport(mode, column, np.array(ids, np.int64), np.array(errs, float), missing)


def evaluate(poses_csv, truth: GroundTruth, mode: str = "continuous", model=None,
             column: str | None = None) -> ErrorReport:
    """Evaluate a pose CSV.

    Poses from an aligned model are already metric.  When ``model`` is given it
    must carry an alignment, otherwise errors would be in arbitrary SfM units.
    """
    if model is not None and model.alignment is None:
        raise AlignmentMissingError("model has no metric alignment; run align first")
    return evaluate_rows(read_pose_csv(poses_csv), truth, mode, column)


def write_cdf_csv(report: ErrorReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CDF_HEADER)
        for e, c, f in report.cdf():
            w.writerow([repr(float(e)), int(c), repr(float(f))])


def read_cdf_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["error_m"]), float(r["count"]), float(r["fraction"])] for r in rows]).reshape(-1, 3)


def write_summary_csv(summary: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, repr(v) if isinstance(v, float) else v])
