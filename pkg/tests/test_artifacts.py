import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from markerless import artifacts as art
from markerless.agent_client import FixtureBackend
from markerless.kinematics import MetricReport
from markerless.stereo_lifter import Skeleton3D
from markerless.synchronizer import synchronize
from markerless.target_tracker import TrackStatus, track

from .conftest import tensor_of


def test_file_names():
    assert art.track_file("cam_a.mp4") == "track_cam_a.json"
    assert art.angles_file("left_knee") == "angles_left_knee.csv"


def test_sync_artifact_restores_the_map(short_scene, tmp_path):
    sync_map = synchronize(FixtureBackend(short_scene.fixtures), {"cam_a.mp4": (120, 30.0), "cam_b.mp4": (120, 30.0)})
    path = art.write_json(art.SyncArtifact.from_domain(sync_map), tmp_path / art.SYNC_FILE)
    restored = art.read_json(art.SyncArtifact, path).to_domain()
    assert restored.pairs == sync_map.pairs
    for video_id, view in sync_map.views.items():
        again = restored.views[video_id]
        assert again.clocks == view.clocks
        assert again.drift.stable_region == view.drift.stable_region
        assert again.validation.passed == view.validation.passed
    assert path.read_text(encoding="utf-8").endswith("}\n")


def test_track_artifact_restores_statuses():
    tensor = tensor_of([[(100, 100)], [(110, 100)], [(900, 900)]])
    result = track(tensor, {0: 0})
    artifact = art.TrackArtifact.from_domain("v", result, {0: 0})
    restored = art.TrackArtifact.model_validate_json(artifact.model_dump_json()).to_domain()
    assert restored.indices.tolist() == [0, 0, -1]
    assert restored.statuses == [TrackStatus.ANCHOR, TrackStatus.PROPAGATED, TrackStatus.MISSING]


def test_invalid_joints_are_written_as_nulls(tmp_path):
    points = np.array([[1.0, 2.0, 3.0], [np.nan, np.nan, np.nan]])
    skeleton = Skeleton3D(12, 0, 51_785_520, points, np.array([True, False]))
    path = art.write_joints([skeleton], tmp_path / art.JOINTS_FILE)
    line = json.loads(path.read_text(encoding="utf-8"))
    assert line["joints"] == [[1.0, 2.0, 3.0, 1], [None, None, None, 0]]
    assert line["frame_pair"] == [12, 0]
    restored = art.read_joints(path)[0]
    assert restored.valid.tolist() == [True, False]
    assert np.isnan(restored.points[1]).all()
    assert art.joints_valid(path)


def test_unreadable_artifacts_are_not_resumed(tmp_path):
    broken = tmp_path / "sync.json"
    broken.write_text('{"views": []', encoding="utf-8")
    assert not art.is_valid(art.SyncArtifact, broken)
    assert not art.is_valid(art.SyncArtifact, tmp_path / "absent.json")
    joints = tmp_path / "joints3d.jsonl"
    joints.write_text('{"frame_pair": [0, 0]}\n', encoding="utf-8")
    assert not art.joints_valid(joints)


def test_metric_record_clamps_rounding_past_one():
    report = MetricReport("left_knee", 0.5, 1.0 + 1e-13, (60.0, 175.0), (60.0, 175.0), 100)
    assert art.MetricRecord.from_domain(report).pearson_r == 1.0
    with pytest.raises(ValidationError):
        art.MetricRecord(triple="x", mae_deg=-1.0, pearson_r=0.0, range_est=(0, 1), range_ref=(0, 1), n_compared=1)


def test_schemas_cover_every_artifact(tmp_path):
    paths = art.write_schemas(tmp_path)
    assert sorted(p.name for p in paths) == sorted(f"{name}.schema.json" for name in art.SCHEMAS)
    sync_schema = json.loads((tmp_path / "sync.schema.json").read_text(encoding="utf-8"))
    assert set(sync_schema["properties"]) == {"views", "pairs"}
    assert sync_schema["additionalProperties"] is False


def test_shipped_schemas_match_the_models(tmp_path):
    shipped = Path(__file__).resolve().parents[1] / "schemas"
    for path in art.write_schemas(tmp_path):
        committed = shipped / path.name
        assert committed.exists(), path.name
        assert json.loads(path.read_text(encoding="utf-8")) == json.loads(committed.read_text(encoding="utf-8")), \
            f"{path.name} is stale; regenerate with `python -m markerless schemas schemas/`"
