"""
config.py - Pipeline configuration: one JSON file plus dotted command-line overrides.

Relative paths resolve against the directory holding the config file. Secrets never
live in the file; the agent token is read from the environment (./.env, else ~/.env).
"""

import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Iterable, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator, model_validator

from . import bundle_adjust as ba
from . import epipolar as epi
from . import frame_preprocess as pre
from . import synchronizer as sync
from . import target_tracker as trk
from .errors import ConfigError
from .kinematics import DEFAULT_TRIPLES, MAX_GAP_MS, JointTriple
from .pose_data import COCO_WHOLEBODY_JOINTS, DEFAULT_CONF_THRESHOLD
from .stereo_lifter import RESIDUAL_GATE_PX, LiftParams

logger = logging.getLogger(__name__)

# ======================
# CONFIGURATION
# ======================
DEFAULT_TOKEN_ENV = "AGENT_API_TOKEN"
DEFAULT_OUTPUT_DIR = "out"


def _resolve(value, info: ValidationInfo):
    if value is None:
        return None
    path = Path(value).expanduser()
    base = (info.context or {}).get("base_dir")
    if base is not None and not path.is_absolute():
        path = Path(base) / path
    return path


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ======================
# SECTIONS
# ======================
class ViewConfig(_Strict):
    video_id: str = Field(min_length=1)
    poses: Path
    fps: float = Field(gt=0, le=1000)
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    face_boxes: Optional[Path] = None

    @field_validator("poses", "face_boxes", mode="before")
    @classmethod
    def resolve_paths(cls, value, info: ValidationInfo):
        return _resolve(value, info)


class AgentConfig(_Strict):
    fixtures: Optional[Path] = None
    url: Optional[str] = None
    model: str = "glm-4.5v"
    token_env: str = DEFAULT_TOKEN_ENV
    max_in_flight: int = Field(default=4, ge=1, le=64)
    record_dir: Optional[Path] = None

    @field_validator("fixtures", "record_dir", mode="before")
    @classmethod
    def resolve_paths(cls, value, info: ValidationInfo):
        return _resolve(value, info)

    @model_validator(mode="after")
    def one_backend(self):
        if (self.fixtures is None) == (self.url is None):
            raise ValueError("set exactly one of agent.fixtures or agent.url")
        return self

    def token(self) -> Optional[str]:
        if Path(".env").exists():
            load_dotenv(".env")
        else:
            load_dotenv(Path.home() / ".env")
        return os.getenv(self.token_env)


class PreprocConfig(_Strict):
    enabled: bool = True
    clahe_tiles: tuple[int, int] = pre.CLAHE_TILES
    clip_limit: float = Field(default=pre.CLAHE_CLIP_LIMIT, ge=1.0)
    blur_sigma: float = Field(default=pre.BLUR_SIGMA, gt=0)
    workers: int = Field(default=4, ge=1)

    @field_validator("clahe_tiles")
    @classmethod
    def positive_tiles(cls, tiles):
        if min(tiles) < 1:
            raise ValueError("CLAHE tile grid must be at least 1x1")
        return tiles


class SyncConfig(_Strict):
    initial_budget: int = Field(default=sync.INITIAL_BUDGET, ge=2)
    refine_budget: int = Field(default=sync.REFINE_BUDGET, ge=0)
    refine_rounds: int = Field(default=sync.REFINE_ROUNDS, ge=0)
    validation_budget: int = Field(default=sync.VALIDATION_BUDGET, ge=0)
    validation_tolerance_ms: float = Field(default=sync.VALIDATION_TOLERANCE_MS, gt=0)
    tol_ms: Optional[float] = Field(default=None, gt=0)
    seed: int = sync.DEFAULT_SEED

    def params(self) -> dict[str, Any]:
        return self.model_dump()


class TrackConfig(_Strict):
    anchor_budget: Optional[int] = Field(default=None, ge=1)
    frames_per_anchor: int = Field(default=trk.FRAMES_PER_ANCHOR, ge=1)
    warmup: int = Field(default=trk.WARMUP_LENGTH, ge=1)
    iou_gate: float = Field(default=trk.IOU_GATE, ge=0, le=1)
    min_joints: int = Field(default=trk.MIN_VALID_JOINTS, ge=2)
    process_noise: tuple[float, float, float, float] = trk.PROCESS_NOISE
    measurement_noise: tuple[float, float] = trk.MEASUREMENT_NOISE
    initial_covariance: tuple[float, float, float, float] = trk.INITIAL_COVARIANCE

    def budget_for(self, frame_count: int) -> int:
        if self.anchor_budget is not None:
            return self.anchor_budget
        return max(1, math.ceil(frame_count / self.frames_per_anchor))

    def params(self, conf_threshold: float) -> trk.TrackParams:
        return trk.TrackParams(
            process_noise=self.process_noise,
            measurement_noise=self.measurement_noise,
            initial_covariance=self.initial_covariance,
            warmup=self.warmup,
            iou_gate=self.iou_gate,
            min_joints=self.min_joints,
            conf_threshold=conf_threshold,
        )


class LiftConfig(_Strict):
    tau_f: float = Field(default=epi.TAU_F, gt=0)
    ransac_iterations: int = Field(default=epi.RANSAC_ITERATIONS, ge=1)
    seed: int = epi.RANSAC_SEED
    focal_scale: float = Field(default=epi.FOCAL_SCALE, gt=0)
    lambda_rep: float = Field(default=ba.LAMBDA_REP, ge=0)
    lambda_epi: float = Field(default=ba.LAMBDA_EPI, ge=0)
    lambda_bone: float = Field(default=ba.LAMBDA_BONE, ge=0)
    huber_delta: float = Field(default=ba.HUBER_DELTA, gt=0)
    learning_rate: float = Field(default=ba.LEARNING_RATE, gt=0)
    iterations: int = Field(default=ba.ITERATIONS, ge=0)
    residual_gate_px: float = Field(default=RESIDUAL_GATE_PX, gt=0)

    def params(self, conf_threshold: float, progress: bool = False) -> LiftParams:
        return LiftParams(conf_threshold=conf_threshold, progress=progress, **self.model_dump())


class TripleConfig(_Strict):
    name: str = Field(min_length=1)
    joints: tuple[int, int, int]

    def to_triple(self) -> JointTriple:
        return JointTriple(self.name, *self.joints)


class KinematicsConfig(_Strict):
    triples: tuple[TripleConfig, ...] = tuple(
        TripleConfig(name=t.name, joints=(t.proximal, t.vertex, t.distal)) for t in DEFAULT_TRIPLES
    )
    max_gap_ms: float = Field(default=MAX_GAP_MS, gt=0)
    reference_dir: Optional[Path] = None

    @field_validator("reference_dir", mode="before")
    @classmethod
    def resolve_paths(cls, value, info: ValidationInfo):
        return _resolve(value, info)

    def joint_triples(self) -> list[JointTriple]:
        return [t.to_triple() for t in self.triples]


# ======================
# PIPELINE
# ======================
class PipelineConfig(_Strict):
    view_a: ViewConfig
    view_b: ViewConfig
    agent: AgentConfig
    frames_dir: Optional[Path] = None
    conf_threshold: float = Field(default=DEFAULT_CONF_THRESHOLD, ge=0, le=1)
    num_joints: int = Field(default=COCO_WHOLEBODY_JOINTS, ge=3)
    output_dir: Path = Field(default=Path(DEFAULT_OUTPUT_DIR), validate_default=True)
    preproc: PreprocConfig = PreprocConfig()
    sync: SyncConfig = SyncConfig()
    track: TrackConfig = TrackConfig()
    lift: LiftConfig = LiftConfig()
    kinematics: KinematicsConfig = KinematicsConfig()

    @field_validator("frames_dir", "output_dir", mode="before")
    @classmethod
    def resolve_paths(cls, value, info: ValidationInfo):
        return _resolve(value, info)

    @model_validator(mode="after")
    def distinct_views(self):
        if self.view_a.video_id == self.view_b.video_id:
            raise ValueError("the two views need distinct video ids")
        for triple in self.kinematics.triples:
            if max(triple.joints) >= self.num_joints:
                raise ValueError(f"triple {triple.name} refers to a joint beyond num_joints={self.num_joints}")
        return self

    @property
    def views(self) -> tuple[ViewConfig, ViewConfig]:
        return self.view_a, self.view_b

    def check_paths(self) -> None:
        """Every input the run will read must exist before any stage starts."""
        required: list[tuple[str, Optional[Path]]] = []
        for key, view in (("view_a", self.view_a), ("view_b", self.view_b)):
            required += [(f"{key}.poses", view.poses), (f"{key}.face_boxes", view.face_boxes)]
        required += [("agent.fixtures", self.agent.fixtures), ("frames_dir", self.frames_dir),
                     ("kinematics.reference_dir", self.kinematics.reference_dir)]
        missing = [f"{key}: {path}" for key, path in required if path is not None and not path.exists()]
        if missing:
            raise ConfigError("missing input paths:\n  " + "\n  ".join(missing))


# ======================
# LOADING
# ======================
def parse_override(item: str) -> tuple[list[str], Any]:
    """'a.b.c=value' -> (['a', 'b', 'c'], value); the value is JSON when it parses."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides: Iterable[str]) -> dict:
    for item in overrides:
        keys, value = parse_override(item)
        node = data
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"cannot override {'.'.join(keys)}: {key} is not a section")
            node = child
        node[keys[-1]] = value
    return data


def load_config(path, overrides: Iterable[str] = ()) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")

    data = apply_overrides(data, overrides)
    try:
        config = PipelineConfig.model_validate(data, context={"base_dir": path.resolve().parent})
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e
    logger.debug("Loaded config %s (output %s)", path, config.output_dir)
    return config
