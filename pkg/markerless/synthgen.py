"""
synthgen.py - Synthetic two-camera scenes with known answers.

A walking-in-place actor (parametric knee, hip and arm schedules) plus optional
distractors is filmed by two pinhole cameras. Each scene directory holds everything
the pipeline reads (pose JSONL per view, agent fixtures, config.json) and everything
a test needs to score it (truth/ and a 100 Hz reference/).

World frame: x lateral, y depth (away from the cameras), z up; the actor faces -y.
Cameras use the OpenCV convention (x right, y down, z forward).
"""

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .agent_client import TARGET_FIXTURES, TIMESTAMP_FIXTURES, format_clock_string
from .epipolar import hat
from .errors import InvalidRigError
from .frame_preprocess import RasterImage
from .kinematics import DEFAULT_TRIPLES, AngleSeries, joint_angle, write_angle_csv
from .pose_data import COCO_WHOLEBODY_JOINTS, PoseTensor, save_pose_jsonl

logger = logging.getLogger(__name__)

# ======================
# CONFIGURATION
# ======================
BODY_JOINTS = 17
BODY_CONFIDENCE = 1.0
EXTRA_CONFIDENCE = 0.3  # below the 0.98 gate, so never used downstream
REFERENCE_RATE_HZ = 100
OUTLIER_SHIFT_PX = (50.0, 150.0)
MISREAD_SHIFT_MS = (1000, 5000)

# body segment lengths in metres for a scale-1 actor
PELVIS_HEIGHT = 0.95
HIP_HALF_WIDTH = 0.10
SHOULDER_HALF_WIDTH = 0.18
TORSO_LENGTH = 0.50
THIGH_LENGTH = 0.45
SHANK_LENGTH = 0.43
UPPER_ARM_LENGTH = 0.30
FOREARM_LENGTH = 0.27
THIGH_SWING_DEG = 20.0

DISTRACTOR_SCALE = 0.75
DISTRACTOR_DEPTH_M = 1.5  # first distractor path sits this far behind the actor
DISTRACTOR_SPACING_M = 1.0
DISTRACTOR_HALF_SPAN_M = 3.0

# extra whole-body joints hang off these body joints: feet, face, hands
EXTRA_ANCHORS = (
    [15] * 3 + [16] * 3          # 17-22
    + [0] * 68                   # 23-90
    + [9] * 21 + [10] * 21       # 91-132
)


class SceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    duration_s: float = Field(default=30.0, gt=0)
    fps_a: float = Field(default=30.0, gt=0)
    fps_b: float = Field(default=30.0, gt=0)
    width: int = Field(default=1920, gt=0)
    height: int = Field(default=1080, gt=0)
    focal_px: float = Field(default=1920.0, gt=0)

    camera_angles_deg: tuple[float, float] = (-15.0, 15.0)
    camera_distance_m: tuple[float, float] = (4.0, 4.0)
    camera_height_m: float = 1.0
    look_at_height_m: float = 0.9

    gait_frequency_hz: float = Field(default=0.5, gt=0)
    knee_min_deg: float = Field(default=60.0, gt=0, lt=180)
    knee_max_deg: float = Field(default=175.0, gt=0, lt=180)
    arm_swing_deg: float = Field(default=20.0, ge=0, le=90)
    elbow_mean_deg: float = Field(default=150.0, gt=0, lt=180)
    elbow_amplitude_deg: float = Field(default=15.0, ge=0)
    sway_m: float = Field(default=1.0, ge=0)
    sway_period_s: float = Field(default=20.0, gt=0)

    distractors: int = Field(default=0, ge=0)
    noise_px: float = Field(default=0.0, ge=0)
    outlier_fraction: float = Field(default=0.0, ge=0, le=1)

    clock_offset_ms: int = Field(default=400, ge=0)
    start_clock_ms: int = Field(default=51_785_120, ge=0)
    duplicated_frames_a: tuple[int, ...] = ()
    duplicated_frames_b: tuple[int, ...] = ()
    clock_misreads: int = Field(default=0, ge=0)

    seed: int = 0
    video_a: str = "cam_a.mp4"
    video_b: str = "cam_b.mp4"

    @model_validator(mode="after")
    def check_schedules(self):
        if self.knee_min_deg >= self.knee_max_deg:
            raise ValueError("knee_min_deg must be below knee_max_deg")
        if not 0 < self.elbow_mean_deg - self.elbow_amplitude_deg <= self.elbow_mean_deg + self.elbow_amplitude_deg < 180:
            raise ValueError("elbow schedule must stay inside (0, 180)")
        for name, fps, dups in (("a", self.fps_a, self.duplicated_frames_a), ("b", self.fps_b, self.duplicated_frames_b)):
            count = self.frame_count(fps)
            if len(set(dups)) != len(dups) or any(not 1 <= d < count for d in dups):
                raise ValueError(f"duplicated_frames_{name} must be distinct frames in [1, {count - 1}]")
        return self

    def frame_count(self, fps: float) -> int:
        return max(2, round(self.duration_s * fps))


# ======================
# CAMERAS
# ======================
@dataclass(frozen=True, eq=False)
class Camera:
    R: np.ndarray  # world -> camera rotation
    C: np.ndarray  # centre in world coordinates
    K: np.ndarray

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.C) @ self.R.T

    def project(self, X: np.ndarray) -> np.ndarray:
        Y = self.to_camera(X) @ self.K.T
        return Y[..., :2] / Y[..., 2:3]


def look_at_camera(angle_deg: float, distance_m: float, height_m: float, target_height_m: float,
                   focal_px: float, width: int, height: int) -> Camera:
    a = np.radians(angle_deg)
    C = np.array([distance_m * np.sin(a), -distance_m * np.cos(a), height_m])
    forward = np.array([0.0, 0.0, target_height_m]) - C
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    K = np.array([[focal_px, 0.0, width / 2.0], [0.0, focal_px, height / 2.0], [0.0, 0.0, 1.0]])
    return Camera(np.vstack([right, down, forward]), C, K)


def camera_rig(spec: SceneSpec) -> tuple[Camera, Camera]:
    cams = tuple(
        look_at_camera(angle, dist, spec.camera_height_m, spec.look_at_height_m, spec.focal_px, spec.width, spec.height)
        for angle, dist in zip(spec.camera_angles_deg, spec.camera_distance_m)
    )
    if np.allclose(cams[0].C, cams[1].C, atol=1e-9):
        raise InvalidRigError("camera centres coincide; the rig has no baseline")
    return cams


def relative_pose(cam_a: Camera, cam_b: Camera) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) taking camera-a coordinates to camera-b coordinates, |t| = 1."""
    R = cam_b.R @ cam_a.R.T
    t = cam_b.R @ (cam_a.C - cam_b.C)
    return R, t / np.linalg.norm(t)


def true_fundamental(cam_a: Camera, cam_b: Camera) -> np.ndarray:
    R, t = relative_pose(cam_a, cam_b)
    F = np.linalg.inv(cam_b.K).T @ hat(t) @ R @ np.linalg.inv(cam_a.K)
    return F / np.linalg.norm(F)


# ======================
# MOTION
# ======================
def _phase(spec: SceneSpec, s: float, shift: float = 0.0) -> float:
    return 2.0 * np.pi * spec.gait_frequency_hz * s + shift


def knee_schedule(spec: SceneSpec, s: float, side: str) -> float:
    mid = (spec.knee_min_deg + spec.knee_max_deg) / 2.0
    amp = (spec.knee_max_deg - spec.knee_min_deg) / 2.0
    return mid + amp * np.cos(_phase(spec, s, 0.0 if side == "left" else np.pi))


def elbow_schedule(spec: SceneSpec, s: float, side: str) -> float:
    sign = 1.0 if side == "left" else -1.0
    return spec.elbow_mean_deg + sign * spec.elbow_amplitude_deg * np.sin(_phase(spec, s))


def _limb(angle_deg: float) -> np.ndarray:
    """Unit vector in the sagittal plane; 0 points down, positive swings forward (-y)."""
    a = np.radians(angle_deg)
    return np.array([0.0, -np.sin(a), -np.cos(a)])


def body_pose(root: np.ndarray, scale: float, knees: Sequence[float], thighs: Sequence[float],
              arms: Sequence[float], elbows: Sequence[float]) -> np.ndarray:
    """17 COCO body joints; angles in degrees as (left, right) pairs."""
    J = np.zeros((BODY_JOINTS, 3))
    pelvis = np.asarray(root, dtype=float) + [0.0, 0.0, PELVIS_HEIGHT * scale]
    head = pelvis + [0.0, 0.0, (TORSO_LENGTH + 0.22) * scale]
    J[0] = head + np.array([0.0, -0.10, 0.0]) * scale
    J[1], J[2] = head + np.array([0.035, -0.09, 0.04]) * scale, head + np.array([-0.035, -0.09, 0.04]) * scale
    J[3], J[4] = head + np.array([0.075, -0.02, 0.02]) * scale, head + np.array([-0.075, -0.02, 0.02]) * scale

    for side, sign in ((0, 1.0), (1, -1.0)):
        shoulder = pelvis + np.array([sign * SHOULDER_HALF_WIDTH, 0.0, TORSO_LENGTH]) * scale
        elbow = shoulder + UPPER_ARM_LENGTH * scale * _limb(arms[side])
        wrist = elbow + FOREARM_LENGTH * scale * _limb(arms[side] + 180.0 - elbows[side])
        hip = pelvis + np.array([sign * HIP_HALF_WIDTH, 0.0, 0.0]) * scale
        knee = hip + THIGH_LENGTH * scale * _limb(thighs[side])
        ankle = knee + SHANK_LENGTH * scale * _limb(thighs[side] - (180.0 - knees[side]))
        J[5 + side], J[7 + side], J[9 + side] = shoulder, elbow, wrist
        J[11 + side], J[13 + side], J[15 + side] = hip, knee, ankle
    return J


def actor_pose(spec: SceneSpec, s: float) -> np.ndarray:
    root = np.array([spec.sway_m * np.sin(2.0 * np.pi * s / spec.sway_period_s), 0.0, 0.0])
    swing = THIGH_SWING_DEG * np.sin(_phase(spec, s))
    arm = spec.arm_swing_deg * np.sin(_phase(spec, s, np.pi))
    return body_pose(
        root, 1.0,
        knees=(knee_schedule(spec, s, "left"), knee_schedule(spec, s, "right")),
        thighs=(swing, -swing),
        arms=(arm, -arm),
        elbows=(elbow_schedule(spec, s, "left"), elbow_schedule(spec, s, "right")),
    )


def distractor_pose(spec: SceneSpec, k: int, s: float, total_s: float) -> np.ndarray:
    """Straight-line walk across the scene behind the actor; alternate distractors cross the other way."""
    u = min(max(s / total_s, 0.0), 1.0)
    x = DISTRACTOR_HALF_SPAN_M * (2.0 * u - 1.0) * (1.0 if k % 2 == 0 else -1.0)
    root = np.array([x, DISTRACTOR_DEPTH_M + DISTRACTOR_SPACING_M * k, 0.0])
    phase = _phase(spec, s, 0.7 * (k + 1))
    swing = 15.0 * np.sin(phase)
    knee = 140.0 + 30.0 * np.cos(phase)
    return body_pose(root, DISTRACTOR_SCALE, knees=(knee, 280.0 - knee), thighs=(swing, -swing),
                     arms=(-swing, swing), elbows=(160.0, 160.0))


def whole_body(body: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Extend 17 body joints to the 133-joint layout with small fixed offsets around anchors."""
    out = np.zeros((COCO_WHOLEBODY_JOINTS, 3))
    out[:BODY_JOINTS] = body
    for j, anchor in enumerate(EXTRA_ANCHORS, start=BODY_JOINTS):
        offset = 0.04 * scale * np.array([np.cos(2.4 * j), 0.5 * np.sin(2.4 * j), np.sin(1.7 * j)])
        out[j] = body[anchor] + offset
    return out


# ======================
# CLOCKS
# ======================
def capture_indices(frame_count: int, duplicated: Sequence[int]) -> list[int]:
    """Capture shown on each video frame; a duplicated frame repeats its predecessor."""
    dups = set(duplicated)
    out, capture = [], -1
    for k in range(frame_count):
        if k not in dups:
            capture += 1
        out.append(max(capture, 0))
    return out


def clock_stream(start_ms: int, fps: float, captures: Sequence[int]) -> list[int]:
    return [start_ms + round(Fraction(c * 1000) / Fraction(fps)) for c in captures]


# ======================
# GENERATION
# ======================
@dataclass(frozen=True)
class SceneFiles:
    root: Path
    config: Path
    poses_a: Path
    poses_b: Path
    fixtures: Path
    truth: Path
    reference: Path


@dataclass(frozen=True, eq=False)
class _View:
    video_id: str
    camera: Camera
    fps: float
    clocks: list[int]
    captures: list[int]


def _render_view(spec: SceneSpec, view: _View, view_no: int, total_s: float):
    """Per-capture 2D persons (shuffled) and the actor's slot in each capture."""
    rng = np.random.default_rng([spec.seed, view_no])
    cache: dict[int, tuple[list[np.ndarray], int]] = {}
    for frame, capture in enumerate(view.captures):
        if capture in cache:
            continue
        s = (view.clocks[frame] - spec.start_clock_ms) / 1000.0
        people = [whole_body(actor_pose(spec, s))]
        people += [whole_body(distractor_pose(spec, k, s, total_s), DISTRACTOR_SCALE) for k in range(spec.distractors)]
        uv = view.camera.project(np.stack(people))  # (P, J, 2)

        if spec.noise_px > 0:
            uv = uv + rng.normal(0.0, spec.noise_px, uv.shape)
        if spec.outlier_fraction > 0:
            hit = rng.random((len(people), BODY_JOINTS)) < spec.outlier_fraction
            angle = rng.uniform(0.0, 2.0 * np.pi, hit.shape)
            radius = rng.uniform(*OUTLIER_SHIFT_PX, hit.shape)
            shift = np.stack([np.cos(angle), np.sin(angle)], axis=-1) * radius[..., None]
            uv[:, :BODY_JOINTS] += np.where(hit[..., None], shift, 0.0)

        conf = np.full(COCO_WHOLEBODY_JOINTS, EXTRA_CONFIDENCE)
        conf[:BODY_JOINTS] = BODY_CONFIDENCE
        order = rng.permutation(len(people))
        persons = [np.column_stack([uv[p], conf]) for p in order]
        cache[capture] = (persons, int(np.flatnonzero(order == 0)[0]))
    return [cache[c] for c in view.captures]


def _misread_frames(spec: SceneSpec, frame_count: int, view_no: int) -> dict[int, int]:
    if spec.clock_misreads == 0 or frame_count <= 2:
        return {}
    rng = np.random.default_rng([spec.seed, 2, view_no])
    frames = rng.choice(np.arange(1, frame_count - 1), size=min(spec.clock_misreads, frame_count - 2), replace=False)
    shifts = rng.integers(*MISREAD_SHIFT_MS, size=len(frames)) * rng.choice([-1, 1], size=len(frames))
    return {int(f): int(d) for f, d in zip(sorted(frames), shifts)}


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, separators=(",", ":")) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def angle_truth(spec: SceneSpec, stamps_ms: Sequence[int]) -> dict[str, AngleSeries]:
    """Angles of the planted actor at clock times, for every default joint triple."""
    stamps = np.asarray(stamps_ms, dtype=np.int64)
    poses = [actor_pose(spec, (t - spec.start_clock_ms) / 1000.0) for t in stamps]
    return {
        triple.name: AngleSeries(triple.name, stamps, np.array([joint_angle(p, triple) for p in poses], dtype=float))
        for triple in DEFAULT_TRIPLES
    }


def generate(spec: SceneSpec, out_dir) -> SceneFiles:
    out = Path(out_dir)
    cam_a, cam_b = camera_rig(spec)
    count_a, count_b = spec.frame_count(spec.fps_a), spec.frame_count(spec.fps_b)
    cap_a = capture_indices(count_a, spec.duplicated_frames_a)
    cap_b = capture_indices(count_b, spec.duplicated_frames_b)
    views = (
        _View(spec.video_a, cam_a, spec.fps_a, clock_stream(spec.start_clock_ms, spec.fps_a, cap_a), cap_a),
        _View(spec.video_b, cam_b, spec.fps_b,
              clock_stream(spec.start_clock_ms + spec.clock_offset_ms, spec.fps_b, cap_b), cap_b),
    )
    last_ms = max(v.clocks[-1] for v in views)
    total_s = (last_ms - spec.start_clock_ms) / 1000.0

    for sub in ("fixtures", "truth", "reference"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    timestamps, targets, identity = [], [], {}
    pose_paths = []
    for view_no, (view, name) in enumerate(zip(views, ("poses_a.jsonl", "poses_b.jsonl"))):
        rendered = _render_view(spec, view, view_no, total_s)
        tensor = PoseTensor.from_frames([(k, persons) for k, (persons, _) in enumerate(rendered)],
                                        COCO_WHOLEBODY_JOINTS)
        save_pose_jsonl(tensor, out / name)
        pose_paths.append(out / name)

        misreads = _misread_frames(spec, len(view.clocks), view_no)
        for k, stamp in enumerate(view.clocks):
            shown = stamp + misreads.get(k, 0)
            timestamps.append({"video": view.video_id, "frame": k, "detected": True,
                               "timestamp": format_clock_string(shown),
                               "note": "misread" if k in misreads else "tablet clock visible"})
        targets += [{"video": view.video_id, "frame": k, "target": slot} for k, (_, slot) in enumerate(rendered)]
        identity[view.video_id] = {str(k): slot for k, (_, slot) in enumerate(rendered)}

    _write_jsonl(out / "fixtures" / TIMESTAMP_FIXTURES, timestamps)
    _write_jsonl(out / "fixtures" / TARGET_FIXTURES, targets)

    R, t = relative_pose(cam_a, cam_b)
    _write_json(out / "truth" / "identity.json", identity)
    _write_json(out / "truth" / "clocks.json", {v.video_id: v.clocks for v in views})
    _write_json(out / "truth" / "geometry.json", {
        "R": R.tolist(), "t": t.tolist(), "K_a": cam_a.K.tolist(), "K_b": cam_b.K.tolist(),
        "C_a": cam_a.C.tolist(), "C_b": cam_b.C.tolist(), "F": true_fundamental(cam_a, cam_b).tolist(),
    })

    seen, truth_stamps = set(), []
    for stamp in views[0].clocks:
        if stamp not in seen:
            seen.add(stamp)
            truth_stamps.append(stamp)
    for name, series in angle_truth(spec, truth_stamps).items():
        write_angle_csv(series, out / "truth" / f"angles_{name}.csv")

    step = 1000 // REFERENCE_RATE_HZ
    reference_stamps = range(spec.start_clock_ms, last_ms + 1, step)
    for name, series in angle_truth(spec, reference_stamps).items():
        write_angle_csv(series, out / "reference" / f"angles_{name}.csv")

    config = {
        "view_a": {"video_id": spec.video_a, "poses": "poses_a.jsonl", "fps": spec.fps_a,
                   "width": spec.width, "height": spec.height},
        "view_b": {"video_id": spec.video_b, "poses": "poses_b.jsonl", "fps": spec.fps_b,
                   "width": spec.width, "height": spec.height},
        "agent": {"fixtures": "fixtures"},
        "output_dir": "out",
        "kinematics": {"reference_dir": "reference"},
    }
    _write_json(out / "config.json", config)
    _write_json(out / "scene.json", spec.model_dump(mode="json"))
    logger.info("Scene written to %s: %d + %d frames, %d distractors", out, count_a, count_b, spec.distractors)
    return SceneFiles(out, out / "config.json", pose_paths[0], pose_paths[1], out / "fixtures",
                      out / "truth", out / "reference")


# ======================
# RASTER FIXTURES
# ======================
def make_ppm_frame(width: int = 64, height: int = 48, seed: int = 0,
                   cast: Sequence[float] = (1.2, 1.0, 0.8), face: Optional[Sequence[int]] = None) -> RasterImage:
    """Small procedural frame: colour-cast gradient with a few rectangles and an optional textured face patch."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    base = 60.0 + 120.0 * (xx / max(width - 1, 1)) * 0.5 + 60.0 * (yy / max(height - 1, 1))
    pixels = np.stack([base * c for c in cast], axis=-1)
    for _ in range(3):
        x0, y0 = rng.integers(0, max(width - 8, 1)), rng.integers(0, max(height - 8, 1))
        pixels[y0:y0 + 8, x0:x0 + 8] = rng.integers(0, 256, 3)
    if face is not None:
        x0, y0, x1, y1 = face
        pixels[y0:y1, x0:x1] = rng.integers(0, 256, (y1 - y0, x1 - x0, 3))
    return RasterImage(np.clip(np.rint(pixels), 0, 255).astype(np.uint8))
