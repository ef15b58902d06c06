"""
stereo_lifter.py - From two tracked 2D pose streams to 3D joint trajectories.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import bundle_adjust as ba
from . import epipolar as epi
from .errors import InsufficientCorrespondenceError
from .pose_data import COCO_BODY_SKELETON, DEFAULT_CONF_THRESHOLD, CameraModel, FrameClock, PoseTensor
from .synchronizer import FramePair
from .target_tracker import TrackResult, TrackStatus

logger = logging.getLogger(__name__)

RESIDUAL_GATE_PX = 10.0


@dataclass(frozen=True)
class LiftParams:
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    tau_f: float = epi.TAU_F
    ransac_iterations: int = epi.RANSAC_ITERATIONS
    seed: int = epi.RANSAC_SEED
    focal_scale: float = epi.FOCAL_SCALE
    lambda_rep: float = ba.LAMBDA_REP
    lambda_epi: float = ba.LAMBDA_EPI
    lambda_bone: float = ba.LAMBDA_BONE
    huber_delta: float = ba.HUBER_DELTA
    learning_rate: float = ba.LEARNING_RATE
    iterations: int = ba.ITERATIONS
    residual_gate_px: float = RESIDUAL_GATE_PX
    progress: bool = False


@dataclass(frozen=True, eq=False)
class Correspondences:
    u1: np.ndarray  # (M, 2)
    u2: np.ndarray
    c1: np.ndarray  # (M,)
    c2: np.ndarray
    pair_index: np.ndarray  # (M,) position in the pairing list
    joints: np.ndarray  # (M,)

    def __len__(self) -> int:
        return int(self.u1.shape[0])


@dataclass(frozen=True, eq=False)
class Skeleton3D:
    frame_a: int
    frame_b: int
    timestamp_ms: Optional[int]
    points: np.ndarray  # (J, 3), NaN where invalid
    valid: np.ndarray  # (J,)


@dataclass(eq=False)
class LiftResult:
    skeletons: list[Skeleton3D]
    fundamental: epi.FundamentalMatrix
    camera_a: CameraModel
    camera_b: CameraModel
    pose: epi.RelativePose
    loss_trace: list[float]
    correspondence_count: int
    residuals: dict = field(default_factory=dict)


def _target(track: TrackResult, tensor: PoseTensor, frame: int) -> Optional[np.ndarray]:
    if track.status_of(frame) == TrackStatus.MISSING:
        return None
    row = tensor.row_of(frame)
    index = track.index_of(frame)
    if row is None or index < 0:
        return None
    return tensor.person(row, index)


def collect_correspondences(
        track_a: TrackResult,
        track_b: TrackResult,
        poses_a: PoseTensor,
        poses_b: PoseTensor,
        pairs: Sequence[FramePair],
        conf_threshold: float = DEFAULT_CONF_THRESHOLD,
) -> Correspondences:
    """Joint pairs confident in both views, over all matched, non-missing frame pairs."""
    u1, u2, c1, c2, tags, joints = [], [], [], [], [], []
    for k, pair in enumerate(pairs):
        if not pair.matched:
            continue
        pa = _target(track_a, poses_a, pair.frame_a)
        pb = _target(track_b, poses_b, pair.frame_b)
        if pa is None or pb is None:
            continue
        keep = np.flatnonzero((pa[:, 2] >= conf_threshold) & (pb[:, 2] >= conf_threshold))
        u1.append(pa[keep, :2])
        u2.append(pb[keep, :2])
        c1.append(pa[keep, 2])
        c2.append(pb[keep, 2])
        tags.append(np.full(len(keep), k))
        joints.append(keep)

    count = sum(len(j) for j in joints)
    if count < epi.MIN_CORRESPONDENCES:
        raise InsufficientCorrespondenceError(f"only {count} confident joint correspondences across views")
    return Correspondences(
        np.vstack(u1), np.vstack(u2), np.concatenate(c1), np.concatenate(c2),
        np.concatenate(tags).astype(np.int64), np.concatenate(joints).astype(np.int64),
    )


def lift_sequence(
        track_a: TrackResult,
        track_b: TrackResult,
        poses_a: PoseTensor,
        poses_b: PoseTensor,
        pairs: Sequence[FramePair],
        image_size_a: tuple[int, int],
        image_size_b: tuple[int, int],
        clocks_a: Sequence[FrameClock] = (),
        params: LiftParams = LiftParams(),
) -> LiftResult:
    """correspondences -> F -> E -> (R, t) -> triangulation -> bundle adjustment -> residual gate."""
    corr = collect_correspondences(track_a, track_b, poses_a, poses_b, pairs, params.conf_threshold)
    F = epi.estimate_fundamental(corr.u1, corr.u2, params.tau_f, params.ransac_iterations, params.seed)

    camera_a = epi.pseudo_intrinsics(*image_size_a, params.focal_scale)
    camera_b = epi.pseudo_intrinsics(*image_size_b, params.focal_scale)
    K1, K2 = camera_a.matrix, camera_b.matrix
    E = epi.essential_from_fundamental(F.matrix, K1, K2)
    pose = epi.recover_pose(E, corr.u1[F.inliers], corr.u2[F.inliers], K1, K2)

    X, valid = epi.triangulate_points(corr.u1, corr.u2, K1, K2, pose.R, pose.t)
    keep = np.flatnonzero(valid)
    logger.info("Triangulated %d/%d correspondences", len(keep), len(corr))
    if len(keep) < epi.MIN_CORRESPONDENCES:
        raise InsufficientCorrespondenceError(f"only {len(keep)} joints triangulate in front of both cameras")

    bone_pairs, bone_groups = ba.bone_pairs_for(
        [(int(corr.pair_index[i]), int(corr.joints[i])) for i in keep], COCO_BODY_SKELETON
    )
    problem = ba.BundleProblem(
        X=X[keep], R=pose.R, t=pose.t, K1=K1, K2=K2,
        u1=corr.u1[keep], u2=corr.u2[keep], c1=corr.c1[keep], c2=corr.c2[keep], F=F.matrix,
        lambda_rep=params.lambda_rep, lambda_epi=params.lambda_epi, lambda_bone=params.lambda_bone,
        huber_delta=params.huber_delta, bone_pairs=bone_pairs, bone_groups=bone_groups,
    )
    refined = ba.bundle_adjust(problem, params.iterations, params.learning_rate, progress=params.progress)
    refined_pose = epi.RelativePose(refined.R, refined.t)

    r1, r2 = epi.reprojection_residuals(refined.X, problem.u1, problem.u2, K1, K2, refined.R, refined.t)
    passed = (r1 <= params.residual_gate_px) & (r2 <= params.residual_gate_px)
    depth_ok = (refined.X[:, 2] > 0) & ((refined.X @ refined.R.T + refined.t)[:, 2] > 0)
    passed &= depth_ok
    logger.info("Residual gate kept %d/%d joints (%.1f px)", int(passed.sum()), len(passed), params.residual_gate_px)

    J = poses_a.num_joints
    stamps = {c.frame_index: c.timestamp_ms for c in clocks_a}
    points = {k: np.full((J, 3), np.nan) for k in range(len(pairs))}
    masks = {k: np.zeros(J, dtype=bool) for k in range(len(pairs))}
    for idx, ok, xyz in zip(keep, passed, refined.X):
        if ok:
            k, j = int(corr.pair_index[idx]), int(corr.joints[idx])
            points[k][j] = xyz
            masks[k][j] = True

    skeletons = [
        Skeleton3D(pair.frame_a, pair.frame_b, stamps.get(pair.frame_a), points[k], masks[k])
        for k, pair in enumerate(pairs) if pair.matched
    ]
    residuals = {
        "view_a_mean_px": float(np.mean(r1)), "view_b_mean_px": float(np.mean(r2)),
        "gated_out": int((~passed).sum()),
    }
    return LiftResult(skeletons, F, camera_a, camera_b, refined_pose, refined.loss_trace, len(corr), residuals)
