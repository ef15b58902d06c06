import numpy as np
import pytest

from markerless.pose_data import PoseTensor
from markerless.synthgen import SceneSpec, camera_rig, generate, relative_pose


def person_at(cx: float, cy: float, half: float = 40.0, joints: int = 17, conf: float = 1.0) -> np.ndarray:
    """A person whose joints sit on a ring around (cx, cy), all at the given confidence."""
    angles = np.linspace(0.0, 2.0 * np.pi, joints, endpoint=False)
    xy = np.column_stack([cx + half * np.cos(angles), cy + half * np.sin(angles)])
    return np.column_stack([xy, np.full(joints, conf)])


def tensor_of(frames) -> PoseTensor:
    """frames: list of lists of (cx, cy) centers, one list per frame."""
    return PoseTensor.from_frames([(k, [person_at(*c) for c in centers]) for k, centers in enumerate(frames)], 17)


@pytest.fixture
def rig():
    return camera_rig(SceneSpec(duration_s=1.0))


@pytest.fixture
def stereo_points(rig):
    """Noise-free correspondences of a random point cloud, in the unit-baseline gauge."""
    cam_a, cam_b = rig
    rng = np.random.default_rng(7)
    world = rng.uniform([-1.0, -0.5, 0.1], [1.0, 0.5, 1.8], size=(60, 3))
    R, t = relative_pose(cam_a, cam_b)
    baseline = np.linalg.norm(cam_b.R @ (cam_a.C - cam_b.C))
    return {
        "u1": cam_a.project(world),
        "u2": cam_b.project(world),
        "K1": cam_a.K,
        "K2": cam_b.K,
        "R": R,
        "t": t,
        "X": cam_a.to_camera(world) / baseline,
    }


@pytest.fixture(scope="session")
def short_scene(tmp_path_factory):
    """Four seconds of the clean scene; enough for the whole pipeline to run quickly."""
    return generate(SceneSpec(duration_s=4.0), tmp_path_factory.mktemp("short_scene"))
