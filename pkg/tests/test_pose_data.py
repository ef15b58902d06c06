import json

import numpy as np
import pytest

from markerless.errors import PoseParseError, PoseSchemaError
from markerless.pose_data import (
    COCO_WHOLEBODY_JOINTS,
    Box,
    CameraModel,
    FrameClock,
    Joint3D,
    Keypoint,
    PoseTensor,
    bbox_of,
    load_joint_names,
    load_pose_jsonl,
    save_pose_jsonl,
)

from .conftest import person_at


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def _kp(n, conf=1.0):
    return [[float(i), float(2 * i), conf] for i in range(n)]


def test_load_pads_to_busiest_frame(tmp_path):
    path = _write(tmp_path / "p.jsonl", [
        {"frame": 0, "persons": [{"keypoints": _kp(5)}]},
        {"frame": 1, "persons": [{"keypoints": _kp(5)}, {"keypoints": _kp(5, 0.5)}]},
        {"frame": 2, "persons": []},
    ])
    tensor = load_pose_jsonl(path)
    assert tensor.keypoints.shape == (3, 2, 5, 3)
    assert tensor.counts.tolist() == [1, 2, 0]
    assert tensor.padded[0].tolist() == [False, True]
    assert np.isnan(tensor.keypoints[0, 1]).all()
    assert tensor.persons(2) == []


def test_frames_are_sorted_and_looked_up(tmp_path):
    path = _write(tmp_path / "p.jsonl", [
        {"frame": 7, "persons": [{"keypoints": _kp(3)}]},
        {"frame": 2, "persons": [{"keypoints": _kp(3)}]},
    ])
    tensor = load_pose_jsonl(path)
    assert tensor.frame_indices.tolist() == [2, 7]
    assert tensor.row_of(7) == 1
    assert tensor.row_of(3) is None


def test_padded_slot_is_not_a_person(tmp_path):
    tensor = PoseTensor.from_frames([(0, [person_at(0, 0)]), (1, [person_at(0, 0), person_at(5, 5)])], 17)
    with pytest.raises(IndexError):
        tensor.person(0, 1)


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text('{"frame": 0, "persons": []}\n{"frame": 1, "persons": [\n', encoding="utf-8")
    with pytest.raises(PoseParseError) as info:
        load_pose_jsonl(path)
    assert info.value.line_number == 2


@pytest.mark.parametrize("record", [
    {"frame": -1, "persons": []},
    {"frame": "3", "persons": []},
    {"frame": 0},
    {"frame": 0, "persons": [{"kp": []}]},
    {"frame": 0, "persons": [{"keypoints": [[1, 2]]}]},
])
def test_schema_violations_are_parse_errors(tmp_path, record):
    with pytest.raises(PoseParseError):
        load_pose_jsonl(_write(tmp_path / "p.jsonl", [record]))


def test_confidence_out_of_range_rejected(tmp_path):
    path = _write(tmp_path / "p.jsonl", [{"frame": 0, "persons": [{"keypoints": _kp(3, 1.5)}]}])
    with pytest.raises(PoseSchemaError):
        load_pose_jsonl(path)


def test_joint_count_mismatch_rejected(tmp_path):
    path = _write(tmp_path / "p.jsonl", [
        {"frame": 0, "persons": [{"keypoints": _kp(4)}]},
        {"frame": 1, "persons": [{"keypoints": _kp(5)}]},
    ])
    with pytest.raises(PoseSchemaError):
        load_pose_jsonl(path)


def test_duplicate_frame_rejected(tmp_path):
    path = _write(tmp_path / "p.jsonl", [
        {"frame": 0, "persons": [{"keypoints": _kp(3)}]},
        {"frame": 0, "persons": [{"keypoints": _kp(3)}]},
    ])
    with pytest.raises(PoseSchemaError):
        load_pose_jsonl(path)


def test_save_then_load_keeps_content(tmp_path):
    tensor = PoseTensor.from_frames([(0, [person_at(10, 20)]), (3, [person_at(1, 2), person_at(30, 40, conf=0.5)])], 17)
    save_pose_jsonl(tensor, tmp_path / "out.jsonl")
    again = load_pose_jsonl(tmp_path / "out.jsonl")
    assert again.frame_indices.tolist() == [0, 3]
    assert np.array_equal(again.padded, tensor.padded)
    assert np.allclose(again.keypoints[~again.padded], tensor.keypoints[~tensor.padded])
    first = json.loads((tmp_path / "out.jsonl").read_text().splitlines()[0])
    assert list(first) == ["frame", "persons"]


def test_bbox_uses_confident_joints_only():
    person = np.array([[0, 0, 1.0], [10, 20, 0.99], [500, 500, 0.2]])
    assert bbox_of(person) == Box(0.0, 0.0, 10.0, 20.0)
    assert bbox_of(person, conf_threshold=0.995) is None


def test_joint_names_cover_whole_body():
    names = load_joint_names()
    assert len(names) == COCO_WHOLEBODY_JOINTS
    assert names[0] == "nose"
    assert len(set(names)) == len(names)


def test_domain_type_invariants():
    with pytest.raises(PoseSchemaError):
        Keypoint(1.0, 2.0, 1.2)
    with pytest.raises(ValueError):
        FrameClock("v", 0, 86_400_000)
    with pytest.raises(ValueError):
        CameraModel(0.0, 1.0, 1.0, 1.0, 2, 2)
    with pytest.raises(ValueError):
        Joint3D(float("nan"), 0.0, 0.0, True)
    assert Joint3D(float("nan"), 0.0, 0.0, False).valid is False
    camera = CameraModel(100.0, 100.0, 50.0, 40.0, 100, 80)
    assert camera.matrix[0, 2] == 50.0
