import json

import numpy as np
import pytest

from markerless.agent_client import FixtureBackend
from markerless.errors import AnchorRequiredError, UndefinedCenterError
from markerless.pose_data import PoseTensor, load_pose_jsonl
from markerless.synthgen import SceneSpec, generate
from markerless.target_tracker import (
    TrackResult,
    TrackStatus,
    associate,
    identify_targets,
    iou,
    kalman_predict,
    kalman_warmup,
    sample_anchor_frames,
    track,
    weighted_center,
)

from .conftest import person_at, tensor_of


class FirstPersonBackend:
    """Always names P0."""

    def __init__(self):
        self.frames = []

    def complete(self, request):
        self.frames.append(request.frame_index)
        return json.dumps({"video": request.video_id, "frame": request.frame_index, "target": 0})


def crossing_frames(n=31, gap=()):
    """Target walks right through a static distractor; slot order flips every frame."""
    frames, truth = [], {}
    for k in range(n):
        target, distractor = (100 + 10 * k, 100), (250, 130)
        if k in gap:
            frames.append([(600, 100)])
            continue
        if k % 2:
            frames.append([distractor, target])
            truth[k] = 1
        else:
            frames.append([target, distractor])
            truth[k] = 0
    return frames, truth


# ======================
# GEOMETRY
# ======================
def test_weighted_center():
    assert weighted_center(person_at(10, 20)) == pytest.approx([10, 20])
    person = np.array([[0.0, 0.0, 1.0], [10.0, 0.0, 3.0], [np.nan, np.nan, np.nan]])
    assert weighted_center(person) == pytest.approx([7.5, 0.0])
    with pytest.raises(UndefinedCenterError):
        weighted_center(person_at(0, 0, conf=0.0))


@pytest.mark.parametrize("a,b,expected", [
    ((0, 0, 2, 2), (0, 0, 2, 2), 1.0),
    ((0, 0, 2, 2), (1, 0, 3, 2), 1 / 3),
    ((0, 0, 1, 1), (5, 5, 6, 6), 0.0),
    ((0, 0, 0, 2), (0, 0, 2, 2), 0.0),
])
def test_iou(a, b, expected):
    assert iou(a, b) == pytest.approx(expected)


def test_association_picks_nearest_and_breaks_ties_low():
    assert associate((0, 0), [(5, 0), (1, 1), (0, 3)]) == 1
    assert associate((0, 0), [(1, 0), (0, 1)]) == 0
    assert associate((0, 0), []) == -1


# ======================
# KALMAN
# ======================
def test_kalman_learns_constant_velocity():
    centers = [(3.0 * t, 2.0 * t) for t in range(20)]
    state = kalman_warmup(centers)
    assert state.mean[2:] == pytest.approx([3.0, 2.0], abs=0.3)
    assert kalman_predict(state).center == pytest.approx([60.0, 40.0], abs=1.0)
    assert state.warmup_count == 20


def test_kalman_covariance_stays_symmetric():
    state = kalman_predict(kalman_warmup([(0, 0), (1, 2), (2, 4)]), steps=7)
    assert np.allclose(state.covariance, state.covariance.T)


def test_warmup_needs_a_center():
    with pytest.raises(ValueError):
        kalman_warmup([])


# ======================
# TRACKING
# ======================
def test_target_followed_through_crossing():
    frames, truth = crossing_frames()
    result = track(tensor_of(frames), {0: 0})
    assert result.identity_accuracy(truth) == 1.0
    assert result.status_of(0) == TrackStatus.ANCHOR
    assert all(result.status_of(k) == TrackStatus.PROPAGATED for k in range(1, 31))


def test_occlusion_marks_missing_then_reacquires():
    frames, truth = crossing_frames(gap=(10, 11, 12))
    result = track(tensor_of(frames), {0: 0})
    for k in (10, 11, 12):
        assert result.index_of(k) == -1
        assert result.status_of(k) == TrackStatus.MISSING
    assert result.identity_accuracy(truth) == 1.0


def test_frames_before_first_anchor_come_from_reverse_pass():
    frames, truth = crossing_frames()
    result = track(tensor_of(frames), {10: truth[10]})
    assert result.identity_accuracy(truth) == 1.0
    assert result.status_of(10) == TrackStatus.ANCHOR
    assert result.status_of(0) == TrackStatus.PROPAGATED


def test_later_anchor_overrides_tracking():
    frames, _ = crossing_frames()
    result = track(tensor_of(frames), {0: 0, 20: 1})
    assert result.index_of(20) == 1
    assert result.status_of(20) == TrackStatus.ANCHOR


def test_anchor_without_target_is_missing():
    frames, truth = crossing_frames()
    result = track(tensor_of(frames), {0: 0, 5: -1})
    assert result.index_of(5) == -1
    assert result.status_of(5) == TrackStatus.MISSING
    assert result.index_of(6) == truth[6]


def test_anchor_on_a_person_with_no_confident_joints_is_missing():
    frames, truth = crossing_frames()
    persons = [[person_at(*c) for c in centers] for centers in frames]
    persons[5][truth[5]] = person_at(*frames[5][truth[5]], conf=0.0)
    tensor = PoseTensor.from_frames(list(enumerate(persons)), 17)
    result = track(tensor, {0: 0, 5: truth[5]})
    assert result.index_of(5) == -1
    assert result.status_of(5) == TrackStatus.MISSING
    assert result.index_of(6) == truth[6]
    assert result.status_of(6) == TrackStatus.PROPAGATED


def test_tracking_needs_a_real_anchor():
    tensor = tensor_of(crossing_frames()[0])
    with pytest.raises(AnchorRequiredError):
        track(tensor, {})
    with pytest.raises(AnchorRequiredError):
        track(tensor, {0: -1, 3: -1})
    with pytest.raises(ValueError):
        track(tensor, {0: 2})


def test_missing_status_must_match_index():
    with pytest.raises(ValueError):
        TrackResult(np.array([0]), np.array([1]), [TrackStatus.MISSING])


# ======================
# ANCHORS
# ======================
def test_anchor_frames_include_backbone_and_hard_frames():
    frames, _ = crossing_frames(n=40, gap=(20,))
    tensor = tensor_of(frames)
    picked = sample_anchor_frames(tensor, budget=3)
    assert picked == sorted(set(picked))
    assert {0, 39} <= set(picked)
    assert {20, 21} & set(picked)
    assert picked == sample_anchor_frames(tensor, budget=3)
    with pytest.raises(ValueError):
        sample_anchor_frames(tensor, budget=0)


def test_identify_targets_queries_each_anchor():
    frames, _ = crossing_frames()
    tensor = tensor_of(frames)
    backend = FirstPersonBackend()
    reply = identify_targets(backend, "v", tensor, budget=2)
    assert sorted(backend.frames) == sorted(reply.as_dict()) == sample_anchor_frames(tensor, 2)
    assert set(reply.as_dict().values()) == {0}


def test_scene_identity_with_distractor(tmp_path):
    scene = generate(SceneSpec(duration_s=4.0, distractors=1), tmp_path)
    tensor = load_pose_jsonl(scene.poses_a, 133)
    reply = identify_targets(FixtureBackend(scene.fixtures), "cam_a.mp4", tensor, budget=1)
    result = track(tensor, reply)
    identity = json.loads((scene.truth / "identity.json").read_text(encoding="utf-8"))["cam_a.mp4"]
    assert result.identity_accuracy({int(k): v for k, v in identity.items()}) >= 0.95
