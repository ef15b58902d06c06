"""
pose_data.py - Shared domain types and the pose JSONL schema.

A pose file holds one JSON object per frame:
    {"frame": 12, "persons": [{"keypoints": [[x, y, c], ...]}, ...]}
Frames with fewer persons than the busiest frame are padded; padded slots are
flagged and filled with NaN so they can never pass for a detection at (0, 0).
"""

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import PoseParseError, PoseSchemaError

logger = logging.getLogger(__name__)

# ======================
# CONFIGURATION
# ======================
COCO_WHOLEBODY_JOINTS = 133
DEFAULT_CONF_THRESHOLD = 0.98  # keypoints below this are not trusted anywhere downstream
MIN_JOINTS = 3
DAY_MS = 86_400_000

# COCO body limbs (first 17 joints), used for overlays and synthetic skeletons
COCO_BODY_SKELETON = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12),
    (5, 11), (6, 12), (5, 6), (5, 7), (6, 8), (7, 9), (8, 10),
    (1, 2), (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
)


# ======================
# DOMAIN TYPES
# ======================
@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    confidence: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise PoseSchemaError(f"keypoint coordinates must be finite, got ({self.x}, {self.y})")
        if not 0.0 <= self.confidence <= 1.0:
            raise PoseSchemaError(f"keypoint confidence {self.confidence} outside [0, 1]")


class Box(NamedTuple):
    """Axis-aligned box in pixels, x0 <= x1 and y0 <= y1."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)


class ClockSource(str, Enum):
    """Where a frame timestamp came from."""

    AGENT_OBSERVED = "agent_observed"
    PROPAGATED = "propagated"
    VALIDATED = "validated"


@dataclass(frozen=True)
class FrameClock:
    video_id: str
    frame_index: int
    timestamp_ms: Optional[int]
    source: ClockSource = ClockSource.PROPAGATED

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be >= 0, got {self.frame_index}")
        if self.timestamp_ms is not None and not 0 <= self.timestamp_ms < DAY_MS:
            raise ValueError(f"timestamp {self.timestamp_ms} ms outside one day")


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Joint3D:
    x: float
    y: float
    z: float
    valid: bool

    def __post_init__(self):
        if self.valid and not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError("valid joints must have finite coordinates")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class AngleSample:
    timestamp_ms: int
    angle_deg: float
    triple_name: str

    def __post_init__(self):
        if not 0.0 <= self.angle_deg <= 180.0:
            raise ValueError(f"angle {self.angle_deg} outside [0, 180]")


@dataclass(frozen=True, eq=False)
class PoseTensor:
    """T frames x N person slots x J joints x (x, y, confidence)."""

    frame_indices: np.ndarray
    keypoints: np.ndarray
    padded: np.ndarray
    num_joints: int = COCO_WHOLEBODY_JOINTS

    def __post_init__(self):
        T = self.frame_indices.shape[0]
        if self.keypoints.ndim != 4 or self.keypoints.shape[0] != T or self.keypoints.shape[3] != 3:
            raise PoseSchemaError(f"keypoints must be (T, N, J, 3), got {self.keypoints.shape}")
        if self.keypoints.shape[2] != self.num_joints:
            raise PoseSchemaError("keypoint joint axis disagrees with num_joints")
        if self.padded.shape != self.keypoints.shape[:2]:
            raise PoseSchemaError("padding flags must be (T, N)")
        for arr in (self.frame_indices, self.keypoints, self.padded):
            arr.setflags(write=False)

    @classmethod
    def from_frames(
            cls,
            frames: Sequence[tuple[int, Sequence[np.ndarray]]],
            num_joints: Optional[int] = None,
    ) -> "PoseTensor":
        """Build a padded tensor from (frame_index, [person (J, 3) arrays]) pairs."""
        frames = sorted(frames, key=lambda item: item[0])
        indices = [frame for frame, _ in frames]
        if len(set(indices)) != len(indices):
            raise PoseSchemaError("duplicate frame index in pose sequence")

        J = num_joints
        for _, persons in frames:
            for person in persons:
                if J is None:
                    J = person.shape[0]
                elif person.shape[0] != J:
                    raise PoseSchemaError(f"expected {J} joints per person, got {person.shape[0]}")
        if J is None:
            J = COCO_WHOLEBODY_JOINTS
        if J < MIN_JOINTS:
            raise PoseSchemaError(f"at least {MIN_JOINTS} joints are required, got {J}")

        N = max((len(persons) for _, persons in frames), default=0)
        keypoints = np.full((len(frames), N, J, 3), np.nan)
        padded = np.ones((len(frames), N), dtype=bool)
        for row, (_, persons) in enumerate(frames):
            for slot, person in enumerate(persons):
                keypoints[row, slot] = person
                padded[row, slot] = False

        return cls(np.asarray(indices, dtype=np.int64), keypoints, padded, J)

    @property
    def num_frames(self) -> int:
        return int(self.frame_indices.shape[0])

    @property
    def max_persons(self) -> int:
        return int(self.keypoints.shape[1])

    @property
    def counts(self) -> np.ndarray:
        """N_t per frame."""
        return (~self.padded).sum(axis=1)

    @cached_property
    def _rows(self) -> dict:
        return {int(frame): row for row, frame in enumerate(self.frame_indices)}

    def row_of(self, frame_index: int) -> Optional[int]:
        return self._rows.get(int(frame_index))

    def person(self, row: int, slot: int) -> np.ndarray:
        if slot < 0 or slot >= self.max_persons or self.padded[row, slot]:
            raise IndexError(f"slot {slot} of row {row} is padding")
        return self.keypoints[row, slot]

    def persons(self, row: int) -> list[np.ndarray]:
        return [self.keypoints[row, slot] for slot in range(self.max_persons) if not self.padded[row, slot]]


# ======================
# IO
# ======================
def _parse_person(person, line_number: int) -> np.ndarray:
    if not isinstance(person, dict) or "keypoints" not in person:
        raise PoseParseError(line_number, "person entry must be an object with 'keypoints'")
    try:
        keypoints = np.asarray(person["keypoints"], dtype=float)
    except (TypeError, ValueError):
        raise PoseParseError(line_number, "keypoints must be numeric [x, y, c] triples")
    if keypoints.ndim != 2 or keypoints.shape[1] != 3:
        raise PoseParseError(line_number, "keypoints must be a list of [x, y, c] triples")
    if not np.isfinite(keypoints).all():
        raise PoseSchemaError(f"line {line_number}: keypoints must be finite")
    conf = keypoints[:, 2]
    if (conf < 0).any() or (conf > 1).any():
        raise PoseSchemaError(f"line {line_number}: confidence outside [0, 1]")
    return keypoints


def load_pose_jsonl(path, num_joints: Optional[int] = None) -> PoseTensor:
    """Read a pose JSONL file into a padded PoseTensor (N = max N_t)."""
    frames = []
    expected_joints = num_joints
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise PoseParseError(line_number, f"invalid JSON ({e.msg})")

            if not isinstance(record, dict):
                raise PoseParseError(line_number, "frame record must be an object")
            frame = record.get("frame")
            persons = record.get("persons")
            if not isinstance(frame, int) or isinstance(frame, bool) or frame < 0:
                raise PoseParseError(line_number, "'frame' must be a non-negative integer")
            if not isinstance(persons, list):
                raise PoseParseError(line_number, "'persons' must be a list")

            parsed = [_parse_person(person, line_number) for person in persons]
            for keypoints in parsed:
                if expected_joints is None:
                    expected_joints = keypoints.shape[0]
                elif keypoints.shape[0] != expected_joints:
                    raise PoseSchemaError(
                        f"line {line_number}: expected {expected_joints} joints, got {keypoints.shape[0]}"
                    )
            frames.append((frame, parsed))

    tensor = PoseTensor.from_frames(frames, expected_joints)
    logger.debug("Loaded %s: T=%d N=%d J=%d", path, tensor.num_frames, tensor.max_persons, tensor.num_joints)
    return tensor


def save_pose_jsonl(tensor: PoseTensor, path) -> None:
    """Write non-padded content; keys are emitted as frame, persons, keypoints."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row, frame in enumerate(tensor.frame_indices):
            persons = [
                {"keypoints": [[float(v) for v in joint] for joint in person]}
                for person in tensor.persons(row)
            ]
            f.write(json.dumps({"frame": int(frame), "persons": persons}, separators=(",", ":")))
            f.write("\n")


def load_joint_names() -> tuple[str, ...]:
    text = (resources.files("markerless") / "assets" / "coco_wholebody_joints.json").read_text(encoding="utf-8")
    return tuple(json.loads(text)["joints"])


# ======================
# GEOMETRY HELPERS
# ======================
def bbox_of(person: np.ndarray, conf_threshold: float = DEFAULT_CONF_THRESHOLD) -> Optional[Box]:
    """Tight box over joints with confidence >= threshold; None with fewer than 2."""
    person = np.asarray(person, dtype=float)
    with np.errstate(invalid="ignore"):
        keep = person[:, 2] >= conf_threshold
    if np.count_nonzero(keep) < 2:
        return None
    xy = person[keep, :2]
    x0, y0 = xy.min(axis=0)
    x1, y1 = xy.max(axis=0)
    return Box(float(x0), float(y0), float(x1), float(y1))
