"""
kinematics.py - Joint angles from 3D skeletons and their agreement with a reference.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import pearsonr

from .errors import NoDataError, NoOverlapError, UndefinedCorrelationError
from .pose_data import AngleSample

logger = logging.getLogger(__name__)

# ======================
# CONFIGURATION
# ======================
MAX_GAP_MS = 200.0
CSV_FLOAT_FORMAT = "%.6f"


@dataclass(frozen=True)
class JointTriple:
    name: str
    proximal: int
    vertex: int
    distal: int

    def __post_init__(self):
        if len({self.proximal, self.vertex, self.distal}) != 3:
            raise ValueError(f"{self.name}: joint indices must be distinct")
        if min(self.proximal, self.vertex, self.distal) < 0:
            raise ValueError(f"{self.name}: joint indices must be non-negative")


# COCO whole-body body indices: 5/6 shoulders, 7/8 elbows, 9/10 wrists, 11/12 hips, 13/14 knees, 15/16 ankles
DEFAULT_TRIPLES = (
    JointTriple("left_knee", 11, 13, 15),
    JointTriple("right_knee", 12, 14, 16),
    JointTriple("left_elbow", 5, 7, 9),
    JointTriple("right_elbow", 6, 8, 10),
    JointTriple("left_hip", 5, 11, 13),
    JointTriple("right_hip", 6, 12, 14),
)


@dataclass(frozen=True, eq=False)
class AngleSeries:
    """Angles in degrees on a millisecond timeline; NaN marks an absent sample."""

    name: str
    timestamps_ms: np.ndarray
    angles_deg: np.ndarray

    def __post_init__(self):
        if self.timestamps_ms.shape != self.angles_deg.shape:
            raise ValueError("timestamps and angles must have the same length")

    def __len__(self) -> int:
        return int(self.timestamps_ms.shape[0])

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.angles_deg)

    @property
    def median_step_ms(self) -> float:
        if len(self) < 2:
            return float("inf")
        return float(np.median(np.diff(self.timestamps_ms)))

    @classmethod
    def from_samples(cls, name: str, samples: Iterable[AngleSample], absent_ms: Iterable[int] = ()) -> "AngleSeries":
        """Time-ordered series from defined samples plus the timestamps where the angle is absent."""
        rows = [(s.timestamp_ms, s.angle_deg) for s in samples] + [(int(t), np.nan) for t in absent_ms]
        rows.sort(key=lambda row: row[0])
        return cls(name, np.asarray([t for t, _ in rows], dtype=np.int64), np.asarray([a for _, a in rows], dtype=float))


@dataclass(frozen=True)
class MetricReport:
    triple_name: str
    mae_deg: float
    pearson_r: float
    range_est: tuple[float, float]
    range_ref: tuple[float, float]
    n_compared: int

    def __post_init__(self):
        if self.mae_deg < 0:
            raise ValueError("MAE cannot be negative")
        if not -1.0 - 1e-12 <= self.pearson_r <= 1.0 + 1e-12:
            raise ValueError(f"correlation {self.pearson_r} outside [-1, 1]")


# ======================
# ANGLES
# ======================
def joint_angle(points: np.ndarray, triple: JointTriple, valid: Optional[np.ndarray] = None) -> Optional[float]:
    """Angle at the vertex between the two limb vectors; None when undefined."""
    points = np.asarray(points, dtype=float)
    idx = (triple.proximal, triple.vertex, triple.distal)
    if max(idx) >= len(points):
        raise ValueError(f"{triple.name}: joint index out of range for {len(points)} joints")
    if valid is not None and not all(valid[i] for i in idx):
        return None
    a, b, c = (points[i] for i in idx)
    if not (np.isfinite(a).all() and np.isfinite(b).all() and np.isfinite(c).all()):
        return None
    u, v = a - b, c - b
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return None
    cosine = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
    return float(np.degrees(np.arccos(cosine)))


def angle_series_from_skeletons(skeletons: Iterable, triple: JointTriple) -> AngleSeries:
    """One sample per skeleton with a timestamp; repeated timestamps keep the first frame."""
    samples, absent = [], []
    seen = set()
    for skeleton in skeletons:
        if skeleton.timestamp_ms is None or skeleton.timestamp_ms in seen:
            continue
        seen.add(skeleton.timestamp_ms)
        angle = joint_angle(skeleton.points, triple, skeleton.valid)
        if angle is None:
            absent.append(skeleton.timestamp_ms)
        else:
            samples.append(AngleSample(skeleton.timestamp_ms, angle, triple.name))
    return AngleSeries.from_samples(triple.name, samples, absent)


# ======================
# RESAMPLING & METRICS
# ======================
def resample(series: AngleSeries, targets: Sequence[float], max_gap_ms: float = MAX_GAP_MS) -> AngleSeries:
    """Linear interpolation onto targets; absent inside long gaps and outside the span."""
    targets = np.asarray(targets)
    if len(series) > 1 and np.any(np.diff(series.timestamps_ms) <= 0):
        raise ValueError("series timestamps must be strictly increasing")
    ts = series.timestamps_ms[series.valid].astype(float)
    vals = series.angles_deg[series.valid]
    out = np.full(len(targets), np.nan)
    if len(ts) == 0:
        return AngleSeries(series.name, targets, out)

    inside = (targets >= ts[0]) & (targets <= ts[-1])
    upper = np.clip(np.searchsorted(ts, targets, side="left"), 0, len(ts) - 1)
    lower = np.clip(upper - 1, 0, len(ts) - 1)
    exact = ts[upper] == targets
    gap = np.where(exact, 0.0, ts[upper] - ts[lower])
    ok = inside & (gap <= max_gap_ms)
    out[ok] = np.interp(targets[ok].astype(float), ts, vals)
    return AngleSeries(series.name, targets, out)


def _co_valid(est, ref) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if est.shape != ref.shape:
        raise ValueError("series must be aligned to the same samples")
    keep = np.isfinite(est) & np.isfinite(ref)
    return est[keep], ref[keep]


def mae(est, ref) -> float:
    e, r = _co_valid(est, ref)
    if len(e) == 0:
        raise NoOverlapError("no co-valid samples to compare")
    return float(np.mean(np.abs(e - r)))


def pearson(est, ref) -> float:
    e, r = _co_valid(est, ref)
    if len(e) < 2:
        raise UndefinedCorrelationError(f"correlation needs >= 2 co-valid samples, got {len(e)}")
    if np.ptp(e) == 0 or np.ptp(r) == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    return float(pearsonr(e, r)[0])


def angle_range(series) -> tuple[float, float]:
    values = np.asarray(series.angles_deg if isinstance(series, AngleSeries) else series, dtype=float)
    values = values[np.isfinite(values)]
    if len(values) == 0:
        raise NoDataError("series has no valid samples")
    return float(values.min()), float(values.max())


def compare_series(est: AngleSeries, ref: AngleSeries, max_gap_ms: float = MAX_GAP_MS) -> MetricReport:
    """Resample the higher-rate series onto the lower-rate timeline, then score."""
    if est.median_step_ms >= ref.median_step_ms:
        a, b = est.angles_deg, resample(ref, est.timestamps_ms, max_gap_ms).angles_deg
    else:
        a, b = resample(est, ref.timestamps_ms, max_gap_ms).angles_deg, ref.angles_deg
    e, r = _co_valid(a, b)
    report = MetricReport(
        triple_name=est.name,
        mae_deg=mae(a, b),
        pearson_r=pearson(a, b),
        range_est=angle_range(est),
        range_ref=angle_range(ref),
        n_compared=len(e),
    )
    logger.info("%s: MAE %.3f deg, r %.4f over %d samples", est.name, report.mae_deg, report.pearson_r, len(e))
    return report


# ======================
# CSV
# ======================
def write_angle_csv(series: AngleSeries, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"timestamp_ms": series.timestamps_ms.astype(np.int64), "angle_deg": series.angles_deg})
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


def read_angle_csv(path, name: Optional[str] = None) -> AngleSeries:
    frame = pd.read_csv(path)
    missing = {"timestamp_ms", "angle_deg"} - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    frame = frame.sort_values("timestamp_ms", kind="stable")
    return AngleSeries(
        name or Path(path).stem.removeprefix("angles_"),
        frame["timestamp_ms"].to_numpy(dtype=np.int64),
        frame["angle_deg"].to_numpy(dtype=float),
    )
