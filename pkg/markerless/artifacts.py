"""
artifacts.py - On-disk stage outputs and their JSON Schemas.

Each stage writes one artifact through a pydantic model, so the schema shipped by
`markerless schemas` is the exact shape the pipeline emits and `--resume` reads back.
"""

import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .kinematics import MetricReport
from .pose_data import ClockSource, FrameClock
from .stereo_lifter import LiftResult, Skeleton3D
from .synchronizer import DriftModel, FramePair, SyncMap, ValidationReport, ValidationSample, VideoSync
from .target_tracker import TrackResult, TrackStatus

logger = logging.getLogger(__name__)

SYNC_FILE = "sync.json"
GEOMETRY_FILE = "geometry.json"
JOINTS_FILE = "joints3d.jsonl"
METRICS_FILE = "metrics.json"


def track_file(video_id: str) -> str:
    return f"track_{Path(video_id).stem}.json"


def angles_file(triple_name: str) -> str:
    return f"angles_{triple_name}.csv"


class _Artifact(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ======================
# SYNC
# ======================
class ClockRecord(_Artifact):
    frame: int = Field(ge=0)
    timestamp_ms: Optional[int]
    source: ClockSource


class ValidationRecord(_Artifact):
    frame: int
    propagated_ms: int
    observed_ms: int


class ViewSyncRecord(_Artifact):
    video_id: str
    nominal_fps: float = Field(gt=0)
    t0_ms: float
    tol_ms: float
    stable_region: tuple[int, int]
    observations: list[tuple[int, int]]
    residuals: list[float]
    rejected: list[tuple[int, int]] = []
    queried: list[int] = []
    validation_tolerance_ms: float
    validation_passed: bool
    validation: list[ValidationRecord] = []
    clocks: list[ClockRecord]

    @classmethod
    def from_domain(cls, view: VideoSync) -> "ViewSyncRecord":
        drift, report = view.drift, view.validation
        return cls(
            video_id=view.video_id,
            nominal_fps=drift.nominal_fps,
            t0_ms=drift.t0_ms,
            tol_ms=drift.tol_ms,
            stable_region=drift.stable_region,
            observations=list(drift.observations),
            residuals=list(drift.residuals),
            rejected=list(drift.rejected),
            queried=list(view.queried),
            validation_tolerance_ms=report.tolerance_ms,
            validation_passed=report.passed,
            validation=[ValidationRecord(frame=s.frame_index, propagated_ms=s.propagated_ms,
                                         observed_ms=s.observed_ms) for s in report.samples],
            clocks=[ClockRecord(frame=c.frame_index, timestamp_ms=c.timestamp_ms, source=c.source)
                    for c in view.clocks],
        )

    def to_domain(self) -> VideoSync:
        drift = DriftModel(
            nominal_fps=self.nominal_fps,
            observations=tuple(tuple(o) for o in self.observations),
            residuals=tuple(self.residuals),
            stable_region=tuple(self.stable_region),
            t0_ms=self.t0_ms,
            tol_ms=self.tol_ms,
            rejected=tuple(tuple(o) for o in self.rejected),
        )
        report = ValidationReport(
            tuple(ValidationSample(v.frame, v.propagated_ms, v.observed_ms) for v in self.validation),
            self.validation_tolerance_ms,
        )
        clocks = tuple(FrameClock(self.video_id, c.frame, c.timestamp_ms, c.source) for c in self.clocks)
        return VideoSync(self.video_id, drift, clocks, report, tuple(self.queried))


class PairRecord(_Artifact):
    frame_a: int
    frame_b: int
    delta_ms: int
    matched: bool


class SyncArtifact(_Artifact):
    views: list[ViewSyncRecord]
    pairs: list[PairRecord]

    @classmethod
    def from_domain(cls, sync_map: SyncMap) -> "SyncArtifact":
        return cls(
            views=[ViewSyncRecord.from_domain(v) for v in sync_map.views.values()],
            pairs=[PairRecord(frame_a=p.frame_a, frame_b=p.frame_b, delta_ms=p.delta_ms, matched=p.matched)
                   for p in sync_map.pairs],
        )

    def to_domain(self) -> SyncMap:
        views = {v.video_id: v.to_domain() for v in self.views}
        pairs = tuple(FramePair(p.frame_a, p.frame_b, p.delta_ms, p.matched) for p in self.pairs)
        return SyncMap(views, pairs)


# ======================
# TRACK
# ======================
class TrackFrameRecord(_Artifact):
    frame: int
    index: int = Field(ge=-1)
    status: TrackStatus


class TrackArtifact(_Artifact):
    video_id: str
    anchors: list[tuple[int, int]]
    frames: list[TrackFrameRecord]

    @classmethod
    def from_domain(cls, video_id: str, result: TrackResult, anchors: dict[int, int]) -> "TrackArtifact":
        return cls(
            video_id=video_id,
            anchors=sorted(anchors.items()),
            frames=[TrackFrameRecord(frame=int(f), index=int(i), status=s)
                    for f, i, s in zip(result.frame_indices, result.indices, result.statuses)],
        )

    def to_domain(self) -> TrackResult:
        return TrackResult(
            np.asarray([r.frame for r in self.frames], dtype=np.int64),
            np.asarray([r.index for r in self.frames], dtype=np.int64),
            [r.status for r in self.frames],
        )


# ======================
# LIFT
# ======================
class SkeletonRecord(_Artifact):
    frame_pair: tuple[int, int]
    timestamp_ms: Optional[int]
    joints: list[tuple[Optional[float], Optional[float], Optional[float], int]]

    @classmethod
    def from_domain(cls, skeleton: Skeleton3D) -> "SkeletonRecord":
        joints = [
            (float(x), float(y), float(z), 1) if ok else (None, None, None, 0)
            for (x, y, z), ok in zip(skeleton.points, skeleton.valid)
        ]
        return cls(frame_pair=(skeleton.frame_a, skeleton.frame_b), timestamp_ms=skeleton.timestamp_ms,
                   joints=joints)

    def to_domain(self) -> Skeleton3D:
        valid = np.asarray([j[3] == 1 for j in self.joints], dtype=bool)
        points = np.asarray([[np.nan if v is None else v for v in j[:3]] for j in self.joints], dtype=float)
        points[~valid] = np.nan
        return Skeleton3D(self.frame_pair[0], self.frame_pair[1], self.timestamp_ms, points, valid)


class GeometryArtifact(_Artifact):
    fundamental: list[list[float]]
    tau_f: float
    inlier_count: int
    correspondence_count: int
    K_a: list[list[float]]
    K_b: list[list[float]]
    R: list[list[float]]
    t: list[float]
    loss_trace: list[float]
    residuals: dict[str, float]

    @classmethod
    def from_domain(cls, result: LiftResult) -> "GeometryArtifact":
        return cls(
            fundamental=result.fundamental.matrix.tolist(),
            tau_f=result.fundamental.tau,
            inlier_count=result.fundamental.inlier_count,
            correspondence_count=result.correspondence_count,
            K_a=result.camera_a.matrix.tolist(),
            K_b=result.camera_b.matrix.tolist(),
            R=result.pose.R.tolist(),
            t=result.pose.t.tolist(),
            loss_trace=[float(v) for v in result.loss_trace],
            residuals={k: float(v) for k, v in result.residuals.items()},
        )


# ======================
# METRICS
# ======================
class MetricRecord(_Artifact):
    triple: str
    mae_deg: float = Field(ge=0)
    pearson_r: float = Field(ge=-1, le=1)
    range_est: tuple[float, float]
    range_ref: tuple[float, float]
    n_compared: int = Field(ge=0)

    @classmethod
    def from_domain(cls, report: MetricReport) -> "MetricRecord":
        return cls(triple=report.triple_name, mae_deg=report.mae_deg,
                   pearson_r=min(1.0, max(-1.0, report.pearson_r)),
                   range_est=report.range_est, range_ref=report.range_ref, n_compared=report.n_compared)


class MetricsArtifact(_Artifact):
    reports: list[MetricRecord]
    skipped: dict[str, str] = {}


# ======================
# IO
# ======================
def write_json(model: BaseModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def read_json(model_cls: type[BaseModel], path):
    return model_cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


def is_valid(model_cls: type[BaseModel], path) -> bool:
    """True when path exists and parses as model_cls; used by --resume."""
    path = Path(path)
    if not path.exists():
        return False
    try:
        read_json(model_cls, path)
    except (ValidationError, ValueError) as e:
        logger.warning("Ignoring unreadable artifact %s: %s", path, e)
        return False
    return True


def write_joints(skeletons: Sequence[Skeleton3D], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for skeleton in skeletons:
            f.write(SkeletonRecord.from_domain(skeleton).model_dump_json() + "\n")
    return path


def read_joints(path) -> list[Skeleton3D]:
    skeletons = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                skeletons.append(SkeletonRecord.model_validate_json(line).to_domain())
    return skeletons


def joints_valid(path) -> bool:
    path = Path(path)
    if not path.exists():
        return False
    try:
        read_joints(path)
    except (ValidationError, ValueError) as e:
        logger.warning("Ignoring unreadable artifact %s: %s", path, e)
        return False
    return True


SCHEMAS: dict[str, type[BaseModel]] = {
    "sync": SyncArtifact,
    "track": TrackArtifact,
    "joints3d_line": SkeletonRecord,
    "geometry": GeometryArtifact,
    "metrics": MetricsArtifact,
}


def write_schemas(directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, model_cls in SCHEMAS.items():
        path = directory / f"{name}.schema.json"
        path.write_text(json.dumps(model_cls.model_json_schema(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    return written
