import json

import numpy as np
import pytest
from pydantic import ValidationError

from markerless.errors import InvalidRigError
from markerless.kinematics import DEFAULT_TRIPLES, joint_angle, read_angle_csv
from markerless.pose_data import load_pose_jsonl
from markerless.synthgen import (
    SceneSpec,
    actor_pose,
    camera_rig,
    capture_indices,
    clock_stream,
    elbow_schedule,
    generate,
    knee_schedule,
    make_ppm_frame,
    true_fundamental,
)


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generation_is_byte_deterministic(tmp_path):
    spec = SceneSpec(duration_s=1.0, distractors=2, noise_px=1.5, outlier_fraction=0.1, clock_misreads=2, seed=11)
    first = generate(spec, tmp_path / "one")
    second = generate(spec, tmp_path / "two")
    assert _tree(first.root) == _tree(second.root)


def test_seed_changes_the_noise(tmp_path):
    a = generate(SceneSpec(duration_s=1.0, noise_px=1.0, seed=1), tmp_path / "a")
    b = generate(SceneSpec(duration_s=1.0, noise_px=1.0, seed=2), tmp_path / "b")
    assert a.poses_a.read_bytes() != b.poses_a.read_bytes()


def test_coincident_cameras_are_rejected():
    with pytest.raises(InvalidRigError):
        camera_rig(SceneSpec(camera_angles_deg=(10.0, 10.0)))


@pytest.mark.parametrize("overrides", [
    {"knee_min_deg": 170.0, "knee_max_deg": 100.0},
    {"duplicated_frames_a": (0,)},
    {"duplicated_frames_b": (5, 5)},
    {"elbow_mean_deg": 170.0, "elbow_amplitude_deg": 20.0},
    {"unknown": 1},
])
def test_invalid_scene_specs(overrides):
    with pytest.raises(ValidationError):
        SceneSpec(**overrides)


def test_planted_angles_are_exact():
    spec = SceneSpec()
    for s in np.linspace(0.0, 10.0, 37):
        pose = actor_pose(spec, s)
        assert joint_angle(pose, DEFAULT_TRIPLES[0]) == pytest.approx(knee_schedule(spec, s, "left"), abs=1e-9)
        assert joint_angle(pose, DEFAULT_TRIPLES[1]) == pytest.approx(knee_schedule(spec, s, "right"), abs=1e-9)
        assert joint_angle(pose, DEFAULT_TRIPLES[2]) == pytest.approx(elbow_schedule(spec, s, "left"), abs=1e-9)


def test_projections_satisfy_the_epipolar_constraint(short_scene):
    poses_a = load_pose_jsonl(short_scene.poses_a, 133)
    poses_b = load_pose_jsonl(short_scene.poses_b, 133)
    F = np.array(json.loads((short_scene.truth / "geometry.json").read_text(encoding="utf-8"))["F"])
    # same capture instant: frame k + 12 of view a and frame k of view b
    for k in (0, 40, 100):
        ua = poses_a.person(poses_a.row_of(k + 12), 0)[:17, :2]
        ub = poses_b.person(poses_b.row_of(k), 0)[:17, :2]
        ha, hb = np.column_stack([ua, np.ones(17)]), np.column_stack([ub, np.ones(17)])
        lines = ha @ F.T
        distance = np.abs(np.sum(hb * lines, axis=1)) / np.linalg.norm(lines[:, :2], axis=1)
        assert distance.max() < 1e-6


def test_true_fundamental_is_rank_two():
    F = true_fundamental(*camera_rig(SceneSpec()))
    s = np.linalg.svd(F, compute_uv=False)
    assert s[2] < 1e-12 * s[0]
    assert np.linalg.norm(F) == pytest.approx(1.0)


def test_view_b_clock_runs_twelve_frames_behind(short_scene):
    clocks = json.loads((short_scene.truth / "clocks.json").read_text(encoding="utf-8"))
    a, b = clocks["cam_a.mp4"], clocks["cam_b.mp4"]
    assert len(a) == len(b) == 120
    assert all(b[k] == a[k + 12] for k in range(108))


def test_duplicated_frames_repeat_the_clock():
    captures = capture_indices(6, [2, 3])
    assert captures == [0, 1, 1, 1, 2, 3]
    assert clock_stream(1000, 30.0, captures) == [1000, 1033, 1033, 1033, 1067, 1100]


def test_fixtures_cover_every_frame(short_scene):
    lines = (short_scene.fixtures / "timestamps.jsonl").read_text(encoding="utf-8").splitlines()
    targets = (short_scene.fixtures / "targets.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == len(targets) == 240
    first = json.loads(lines[0])
    assert first == {"video": "cam_a.mp4", "frame": 0, "detected": True,
                     "timestamp": "14:23:05.120", "note": "tablet clock visible"}


def test_misreads_avoid_the_endpoints(tmp_path):
    scene = generate(SceneSpec(duration_s=1.0, clock_misreads=5, seed=3), tmp_path)
    records = [json.loads(line) for line in (scene.fixtures / "timestamps.jsonl").read_text().splitlines()]
    misread = [r["frame"] for r in records if r["note"] == "misread"]
    assert len(misread) == 10
    assert not {0, 29} & set(misread)


def test_reference_is_sampled_at_100_hz(short_scene):
    reference = read_angle_csv(short_scene.reference / "angles_left_knee.csv")
    assert set(np.diff(reference.timestamps_ms)) == {10}
    assert reference.timestamps_ms[0] == 51_785_120
    assert reference.angles_deg.min() >= 60.0 - 1e-9
    assert reference.angles_deg.max() <= 175.0 + 1e-9


def test_config_points_at_scene_files(short_scene):
    config = json.loads(short_scene.config.read_text(encoding="utf-8"))
    assert config["view_a"]["poses"] == "poses_a.jsonl"
    assert config["agent"] == {"fixtures": "fixtures"}
    assert config["kinematics"] == {"reference_dir": "reference"}


def test_ppm_frame_is_seeded():
    a, b = make_ppm_frame(seed=4), make_ppm_frame(seed=4)
    assert a.same_pixels(b)
    assert not a.same_pixels(make_ppm_frame(seed=5))
    assert a.pixels.shape == (48, 64, 3)
