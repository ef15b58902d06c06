"""
target_tracker.py - Follow one person through a crowded pose sequence.

The agent names the target on a handful of anchor frames. Between anchors a
constant-velocity Kalman filter on the confidence-weighted body center predicts
where the target should be; the nearest valid candidate is taken if its box still
overlaps the last accepted target box, otherwise the frame is marked missing.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from filterpy.kalman import predict as kf_predict
from filterpy.kalman import update as kf_update

from .agent_client import AgentBackend, TargetQuery, TargetRender, TargetReply, query_targets, render_indexed_poses
from .errors import AnchorRequiredError, UndefinedCenterError
from .frame_preprocess import RasterImage
from .pose_data import DEFAULT_CONF_THRESHOLD, Box, PoseTensor, bbox_of
from .synchronizer import sample_initial

logger = logging.getLogger(__name__)

# ======================
# CONFIGURATION
# ======================
PROCESS_NOISE = (1.0, 1.0, 4.0, 4.0)  # px^2, (px/frame)^2
MEASUREMENT_NOISE = (25.0, 25.0)  # px^2
INITIAL_COVARIANCE = (100.0, 100.0, 400.0, 400.0)
WARMUP_LENGTH = 5
IOU_GATE = 0.05
MIN_VALID_JOINTS = 6
FRAMES_PER_ANCHOR = 300

# constant-velocity transition and position-only measurement
TRANSITION = np.array([[1.0, 0.0, 1.0, 0.0],
                       [0.0, 1.0, 0.0, 1.0],
                       [0.0, 0.0, 1.0, 0.0],
                       [0.0, 0.0, 0.0, 1.0]])
MEASUREMENT = np.array([[1.0, 0.0, 0.0, 0.0],
                        [0.0, 1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class TrackParams:
    process_noise: tuple[float, ...] = PROCESS_NOISE
    measurement_noise: tuple[float, ...] = MEASUREMENT_NOISE
    initial_covariance: tuple[float, ...] = INITIAL_COVARIANCE
    warmup: int = WARMUP_LENGTH
    iou_gate: float = IOU_GATE
    min_joints: int = MIN_VALID_JOINTS
    conf_threshold: float = DEFAULT_CONF_THRESHOLD

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.process_noise)

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.measurement_noise)

    @property
    def P0(self) -> np.ndarray:
        return np.diag(self.initial_covariance)


DEFAULT_PARAMS = TrackParams()


class TrackStatus(str, Enum):
    """How the target of a frame was chosen."""

    ANCHOR = "anchor"
    PROPAGATED = "propagated"
    MISSING = "missing"


@dataclass(frozen=True, eq=False)
class KalmanState:
    mean: np.ndarray  # (x, y, vx, vy)
    covariance: np.ndarray
    warmup_count: int = 1

    @property
    def center(self) -> np.ndarray:
        return self.mean[:2].copy()


@dataclass(frozen=True)
class Candidate:
    slot: int
    center: np.ndarray
    box: Box


@dataclass
class TrackResult:
    frame_indices: np.ndarray
    indices: np.ndarray
    statuses: list[TrackStatus]
    last_box: Optional[Box] = None
    boxes: list[Optional[Box]] = field(default_factory=list)

    def __post_init__(self):
        for index, status in zip(self.indices, self.statuses):
            if (status == TrackStatus.MISSING) != (index == -1):
                raise ValueError("missing status must coincide with index -1")

    def index_of(self, frame_index: int) -> int:
        rows = np.flatnonzero(self.frame_indices == frame_index)
        return int(self.indices[rows[0]]) if len(rows) else -1

    def status_of(self, frame_index: int) -> TrackStatus:
        rows = np.flatnonzero(self.frame_indices == frame_index)
        return self.statuses[int(rows[0])] if len(rows) else TrackStatus.MISSING

    def identity_accuracy(self, truth: Mapping[int, int]) -> float:
        """Share of frames in truth whose chosen index matches the planted identity."""
        if not truth:
            return 1.0
        hits = sum(self.index_of(frame) == index for frame, index in truth.items())
        return hits / len(truth)


# ======================
# GEOMETRY
# ======================
def weighted_center(person: np.ndarray) -> np.ndarray:
    """Confidence-weighted centroid over all detected joints."""
    person = np.asarray(person, dtype=float)
    finite = np.isfinite(person).all(axis=1)
    xy, conf = person[finite, :2], person[finite, 2]
    total = conf.sum()
    if total <= 0:
        raise UndefinedCenterError("all joint confidences are zero")
    return (conf[:, None] * xy).sum(axis=0) / total


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    ix = max(0.0, min(box_a[2], box_b[2]) - max(box_a[0], box_b[0]))
    iy = max(0.0, min(box_a[3], box_b[3]) - max(box_a[1], box_b[1]))
    inter = ix * iy
    area_a = max(0.0, box_a[2] - box_a[0]) * max(0.0, box_a[3] - box_a[1])
    area_b = max(0.0, box_b[2] - box_b[0]) * max(0.0, box_b[3] - box_b[1])
    union = area_a + area_b - inter
    if area_a <= 0 or area_b <= 0 or union <= 0:
        return 0.0
    return inter / union


def associate(prediction: Sequence[float], candidates: Sequence[Sequence[float]]) -> int:
    """Index of the candidate center nearest the prediction; ties to the lower index, -1 if none."""
    best, best_dist = -1, math.inf
    for index, center in enumerate(candidates):
        dist = math.hypot(center[0] - prediction[0], center[1] - prediction[1])
        if dist < best_dist:
            best, best_dist = index, dist
    return best


def valid_candidates(tensor: PoseTensor, row: int, params: TrackParams = DEFAULT_PARAMS) -> list[Candidate]:
    out = []
    for slot in range(tensor.max_persons):
        if tensor.padded[row, slot]:
            continue
        person = tensor.keypoints[row, slot]
        if np.count_nonzero(person[:, 2] >= params.conf_threshold) < params.min_joints:
            continue
        box = bbox_of(person, params.conf_threshold)
        try:
            center = weighted_center(person)
        except UndefinedCenterError:
            continue
        out.append(Candidate(slot, center, box))
    return out


# ======================
# KALMAN
# ======================
def _symmetrize(P: np.ndarray) -> np.ndarray:
    return (P + P.T) / 2.0


def kalman_init(center: Sequence[float], params: TrackParams = DEFAULT_PARAMS) -> KalmanState:
    mean = np.array([center[0], center[1], 0.0, 0.0], dtype=float)
    return KalmanState(mean, params.P0.copy(), 1)


def kalman_predict(state: KalmanState, params: TrackParams = DEFAULT_PARAMS, steps: int = 1) -> KalmanState:
    x, P = state.mean, state.covariance
    for _ in range(max(1, steps)):
        x, P = kf_predict(x, P, F=TRANSITION, Q=params.Q)
    return KalmanState(np.asarray(x, dtype=float), _symmetrize(P), state.warmup_count)


def kalman_update(state: KalmanState, measurement: Sequence[float], params: TrackParams = DEFAULT_PARAMS) -> KalmanState:
    x, P = kf_update(state.mean, state.covariance, np.asarray(measurement, dtype=float)[:2], params.R, MEASUREMENT)
    return KalmanState(np.asarray(x, dtype=float), _symmetrize(P), state.warmup_count + 1)


def kalman_warmup(centers: Sequence[Sequence[float]], params: TrackParams = DEFAULT_PARAMS) -> KalmanState:
    """Initialize on the first center and run predict/update over the rest."""
    if not len(centers):
        raise ValueError("warm-up needs at least one center")
    state = kalman_init(centers[0], params)
    for center in centers[1:]:
        state = kalman_update(kalman_predict(state, params), center, params)
    return state


# ======================
# ANCHORS
# ======================
def _frame_score(tensor: PoseTensor, row: int, w_proximity: float, w_instability: float) -> float:
    centers = []
    for person in tensor.persons(row):
        try:
            centers.append(weighted_center(person))
        except UndefinedCenterError:
            continue
    score = 0.0
    if len(centers) >= 2:
        pts = np.asarray(centers)
        dists = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        dmin = dists[np.triu_indices(len(pts), k=1)].min()
        score += w_proximity / (1.0 + dmin)
    if row > 0 and tensor.counts[row] != tensor.counts[row - 1]:
        score += w_instability
    return score


def sample_anchor_frames(
        tensor: PoseTensor,
        budget: int,
        w_proximity: float = 1.0,
        w_instability: float = 1.0,
) -> list[int]:
    """Top-scored frames (close persons, changing counts) merged with an even backbone."""
    if budget < 1:
        raise ValueError("anchor budget must be >= 1")
    T = tensor.num_frames
    if T == 0:
        return []
    backbone_rows = sample_initial(T, max(budget, 2)) if T >= 2 else [0]

    scores = [(_frame_score(tensor, row, w_proximity, w_instability), row) for row in range(T)]
    scored = sorted((item for item in scores if item[0] > 0), key=lambda item: (-item[0], item[1]))
    rows = set(backbone_rows) | {row for _, row in scored[:budget]}
    return sorted(int(tensor.frame_indices[row]) for row in rows)


def identify_targets(
        backend: AgentBackend,
        video_id: str,
        tensor: PoseTensor,
        budget: int,
        frame_loader: Optional[Callable[[int], RasterImage]] = None,
        max_in_flight: int = 4,
) -> TargetReply:
    """Ask the agent which person is the subject on each sampled anchor frame."""
    renders = []
    for frame in sample_anchor_frames(tensor, budget):
        row = tensor.row_of(frame)
        persons = tensor.persons(row)
        image = render_indexed_poses(frame_loader(frame), persons) if frame_loader else None
        renders.append(TargetRender(frame, len(persons), image))
    reply = query_targets(backend, TargetQuery(video_id, tuple(renders)), max_in_flight)
    logger.info("%s: %d anchor frames identified", video_id, len(reply.indices))
    return reply


# ======================
# TRACKING
# ======================
@dataclass
class _PassState:
    kalman: Optional[KalmanState] = None
    last_box: Optional[Box] = None
    last_frame: Optional[int] = None
    history: list = field(default_factory=list)  # consecutive accepted (center, box)


def _anchor_reset(state: _PassState, center: np.ndarray, box: Optional[Box], params: TrackParams) -> KalmanState:
    """Re-seed the filter at an anchor, warming up on the preceding run only if it agrees with it."""
    recent = state.history[-(params.warmup - 1):] if params.warmup > 1 else []
    consistent = bool(recent) and box is not None and recent[-1][1] is not None \
        and iou(recent[-1][1], box) >= params.iou_gate
    if consistent:
        warm = kalman_warmup([c for c, _ in recent], params)
        return kalman_update(kalman_predict(warm, params), center, params)
    return kalman_init(center, params)


def _run_pass(
        tensor: PoseTensor,
        rows: Sequence[int],
        anchors: Mapping[int, int],
        params: TrackParams,
        indices: np.ndarray,
        statuses: list,
        boxes: list,
        write: Callable[[int], bool],
) -> _PassState:
    state = _PassState()
    for row in rows:
        frame = int(tensor.frame_indices[row])
        steps = abs(frame - state.last_frame) if state.last_frame is not None else 1

        if frame in anchors:
            slot = anchors[frame]
            center = None
            if slot >= 0:
                person = tensor.person(row, slot)
                try:
                    center = weighted_center(person)
                except UndefinedCenterError:
                    logger.warning("Anchor at frame %d names person %d with no confident joints; frame left missing",
                                   frame, slot)
            if center is None:
                result = (-1, TrackStatus.MISSING, None)
                state.history.clear()
                if state.kalman is not None:
                    state.kalman = kalman_predict(state.kalman, params, steps)
            else:
                box = bbox_of(person, params.conf_threshold) or bbox_of(person, 0.0)
                state.kalman = _anchor_reset(state, center, box, params)
                state.last_box = box
                state.history.append((center, box))
                result = (slot, TrackStatus.ANCHOR, box)
        elif state.kalman is None:
            continue
        else:
            state.kalman = kalman_predict(state.kalman, params, steps)
            candidates = valid_candidates(tensor, row, params)
            choice = associate(state.kalman.center, [c.center for c in candidates])
            accepted = None
            if choice >= 0:
                cand = candidates[choice]
                if state.last_box is None or iou(cand.box, state.last_box) >= params.iou_gate:
                    accepted = cand
            if accepted is None:
                state.history.clear()
                result = (-1, TrackStatus.MISSING, None)
            else:
                state.kalman = kalman_update(state.kalman, accepted.center, params)
                state.last_box = accepted.box
                state.history.append((accepted.center, accepted.box))
                result = (accepted.slot, TrackStatus.PROPAGATED, accepted.box)

        state.last_frame = frame
        if write(row):
            indices[row], statuses[row], boxes[row] = result
    return state


def track(
        tensor: PoseTensor,
        anchors: Union[TargetReply, Mapping[int, int]],
        params: TrackParams = DEFAULT_PARAMS,
) -> TrackResult:
    """Anchor-corrected Kalman tracking; frames before the first anchor come from a reversed pass."""
    anchor_map = anchors.as_dict() if isinstance(anchors, TargetReply) else dict(anchors)
    anchor_map = {f: i for f, i in anchor_map.items() if tensor.row_of(f) is not None}
    for frame, slot in anchor_map.items():
        row = tensor.row_of(frame)
        if not -1 <= slot < tensor.counts[row]:
            raise ValueError(f"anchor index {slot} outside [-1, {tensor.counts[row] - 1}] at frame {frame}")
    valid_rows = sorted(tensor.row_of(f) for f, i in anchor_map.items() if i >= 0)
    if not valid_rows:
        raise AnchorRequiredError("tracking needs at least one anchor frame with a target")

    T = tensor.num_frames
    indices = np.full(T, -1, dtype=np.int64)
    statuses = [TrackStatus.MISSING] * T
    boxes: list[Optional[Box]] = [None] * T
    first = valid_rows[0]

    forward = _run_pass(tensor, range(first, T), anchor_map, params, indices, statuses, boxes,
                        write=lambda row: True)
    _run_pass(tensor, range(first, -1, -1), anchor_map, params, indices, statuses, boxes,
              write=lambda row: row < first)

    missing = statuses.count(TrackStatus.MISSING)
    logger.debug("Tracked %d frames: %d anchors, %d missing", T, len(valid_rows), missing)
    return TrackResult(tensor.frame_indices.copy(), indices, statuses, forward.last_box, boxes)
