import json

import pytest

from markerless.config import (
    AgentConfig,
    PipelineConfig,
    TrackConfig,
    apply_overrides,
    load_config,
    parse_override,
)
from markerless.errors import ConfigError
from markerless.stereo_lifter import LiftParams


def _write(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def _minimal():
    view = {"poses": "p.jsonl", "fps": 30, "width": 640, "height": 480}
    return {
        "view_a": dict(view, video_id="a.mp4"),
        "view_b": dict(view, video_id="b.mp4"),
        "agent": {"fixtures": "fx"},
    }


def test_scene_config_resolves_against_its_directory(short_scene):
    config = load_config(short_scene.config)
    root = short_scene.root.resolve()
    assert config.view_a.poses == root / "poses_a.jsonl"
    assert config.agent.fixtures == root / "fixtures"
    assert config.output_dir == root / "out"
    assert config.kinematics.reference_dir == root / "reference"
    assert config.frames_dir is None
    assert config.conf_threshold == 0.98
    config.check_paths()


def test_overrides_are_json_typed(short_scene):
    config = load_config(short_scene.config, ["sync.seed=3", "lift.iterations=10", "agent.model=qwen-vl",
                                              "track.anchor_budget=2", "sync.tol_ms=null"])
    assert config.sync.seed == 3
    assert config.lift.iterations == 10
    assert config.agent.model == "qwen-vl"
    assert config.track.budget_for(10_000) == 2
    assert config.sync.tol_ms is None


def test_parse_override():
    assert parse_override("a.b=[1, 2]") == (["a", "b"], [1, 2])
    assert parse_override("name=cam 1") == (["name"], "cam 1")
    for bad in ("novalue", "=3"):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_override_cannot_descend_into_a_value():
    with pytest.raises(ConfigError):
        apply_overrides({"sync": {"seed": 1}}, ["sync.seed.x=2"])
    assert apply_overrides({}, ["lift.tau_f=0.01"]) == {"lift": {"tau_f": 0.01}}


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, [1, 2], "list.json"))


@pytest.mark.parametrize("mutate", [
    lambda d: d["view_b"].update(video_id="a.mp4"),
    lambda d: d["agent"].update(url="http://agent.local"),
    lambda d: d.update(agent={}),
    lambda d: d.update(surprise=True),
    lambda d: d.update(num_joints=10),
    lambda d: d["view_a"].update(fps=0),
    lambda d: d.update(sync={"initial_budget": 1}),
    lambda d: d.update(preproc={"clahe_tiles": [0, 4]}),
])
def test_invalid_configs(tmp_path, mutate):
    data = _minimal()
    mutate(data)
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, data))


def test_check_paths_lists_every_missing_input(tmp_path):
    config = load_config(_write(tmp_path, _minimal()))
    with pytest.raises(ConfigError) as info:
        config.check_paths()
    message = str(info.value)
    assert "view_a.poses" in message and "view_b.poses" in message and "agent.fixtures" in message


def test_anchor_budget_scales_with_length():
    assert TrackConfig().budget_for(120) == 1
    assert TrackConfig().budget_for(301) == 2
    assert TrackConfig(anchor_budget=5).budget_for(10) == 5


def test_section_params():
    config = PipelineConfig.model_validate(_minimal())
    params = config.lift.params(0.9, progress=True)
    assert isinstance(params, LiftParams)
    assert params.conf_threshold == 0.9 and params.progress
    assert config.track.params(0.5).conf_threshold == 0.5
    assert set(config.sync.params()) == {"initial_budget", "refine_budget", "refine_rounds", "validation_budget",
                                         "validation_tolerance_ms", "tol_ms", "seed"}


def test_token_prefers_the_environment(monkeypatch):
    monkeypatch.setenv("MARKERLESS_TEST_TOKEN", "from-env")
    agent = AgentConfig(url="http://agent.local", token_env="MARKERLESS_TEST_TOKEN")
    assert agent.token() == "from-env"


def test_token_from_local_dotenv(tmp_path, monkeypatch):
    monkeypatch.setenv("MARKERLESS_TEST_TOKEN", "placeholder")
    monkeypatch.delenv("MARKERLESS_TEST_TOKEN")
    monkeypatch.chdir(tmp_path)
    (tmp_path / ".env").write_text("MARKERLESS_TEST_TOKEN=from-dotenv\n", encoding="utf-8")
    agent = AgentConfig(url="http://agent.local", token_env="MARKERLESS_TEST_TOKEN")
    assert agent.token() == "from-dotenv"
