"""
agent_client.py - Talk to the multimodal agent that reads clocks and picks the target.

Two backends share one parse layer:
  * HttpBackend posts {"model", "prompt", "image_b64"} to a JSON endpoint
  * FixtureBackend replays recorded replies from JSONL files
The parse layer is total: it either returns a reply that satisfies its invariants
or raises AgentProtocolError carrying the raw payload.
"""

import base64
import io
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import requests
from PIL import Image, ImageDraw

from .errors import AgentPrivacyError, AgentProtocolError, AgentTransportError, ClockParseError
from .frame_preprocess import RasterImage
from .pose_data import COCO_BODY_SKELETON, DAY_MS, bbox_of

logger = logging.getLogger(__name__)

# ======================
# CONFIGURATION
# ======================
DEFAULT_MODEL = "glm-4.5v"
REQUEST_TIMEOUT = 60  # seconds
MAX_RETRIES = 3
DELAY_BETWEEN_RETRIES = 2  # seconds
MAX_IN_FLIGHT = 4

TIMESTAMP_PROMPT = "timestamp_prompt_v1.txt"
TARGET_PROMPT = "target_prompt_v1.txt"
TIMESTAMP_FIXTURES = "timestamps.jsonl"
TARGET_FIXTURES = "targets.jsonl"

TIMESTAMP_FIELDS = ("video", "frame", "detected", "timestamp", "note")
TARGET_FIELDS = ("video", "frame", "target")

# overlay drawing
LABEL_MARGIN = 16  # px above the box reserved for the "P<i>" label
OVERLAY_CONF = 0.3
PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
)

_CLOCK = re.compile(r"^(?:(\d{1,2}):)?(\d{2}):(\d{2})\.(\d{3})$")


# ======================
# QUERY / REPLY TYPES
# ======================
@dataclass(frozen=True)
class TimestampQuery:
    video_id: str
    frame_index: int
    image: Optional[RasterImage] = None
    frame_count: Optional[int] = None

    def __post_init__(self):
        if self.frame_index < 0 or (self.frame_count is not None and self.frame_index >= self.frame_count):
            raise ValueError(f"frame {self.frame_index} outside video {self.video_id}")

    @property
    def key(self) -> tuple[str, int]:
        return self.video_id, self.frame_index


@dataclass(frozen=True)
class TimestampReply:
    video_id: str
    frame_index: int
    detected: bool
    timestamp_raw: Optional[str]
    note: str = ""

    def __post_init__(self):
        if not self.detected and self.timestamp_raw is not None:
            raise ValueError("a reply without detection cannot carry a timestamp")


@dataclass(frozen=True)
class TargetRender:
    frame_index: int
    person_count: int
    image: Optional[RasterImage] = None


@dataclass(frozen=True)
class TargetQuery:
    video_id: str
    renders: tuple[TargetRender, ...]


@dataclass(frozen=True)
class TargetReply:
    video_id: str
    indices: tuple[tuple[int, int], ...]  # (frame_index, chosen index), -1 = no target

    def as_dict(self) -> dict[int, int]:
        return dict(self.indices)


@dataclass(frozen=True)
class AgentRequest:
    kind: str  # "timestamp" | "target"
    video_id: str
    frame_index: int
    prompt: str
    image: Optional[RasterImage] = None


class AgentBackend(Protocol):
    def complete(self, request: AgentRequest) -> str:
        """Return the agent's raw text reply."""


# ======================
# CLOCK STRINGS
# ======================
def parse_clock_string(raw: str) -> int:
    """HH:MM:SS.mmm (or MM:SS.mmm) -> milliseconds since midnight."""
    match = _CLOCK.match(raw.strip()) if isinstance(raw, str) else None
    if not match:
        raise ClockParseError(f"not a clock reading: {raw!r}")
    hours = int(match.group(1) or 0)
    minutes, seconds, millis = int(match.group(2)), int(match.group(3)), int(match.group(4))
    if hours > 23 or minutes > 59 or seconds > 59:
        raise ClockParseError(f"clock field out of range: {raw!r}")
    return ((hours * 60 + minutes) * 60 + seconds) * 1000 + millis


def format_clock_string(ms: int) -> str:
    if not 0 <= ms < DAY_MS:
        raise ValueError(f"{ms} ms is outside one day")
    seconds, millis = divmod(int(ms), 1000)
    minutes, seconds = divmod(seconds, 60)
    hours, minutes = divmod(minutes, 60)
    return f"{hours:02d}:{minutes:02d}:{seconds:02d}.{millis:03d}"


# ======================
# PROMPTS & PAYLOADS
# ======================
def load_prompt(name: str) -> str:
    return (resources.files("markerless") / "assets" / name).read_text(encoding="utf-8")


def extract_json_object(text: str) -> dict:
    """Parse the first balanced {...} in text; models often wrap JSON in prose."""
    start = text.find("{")
    if start < 0:
        raise ValueError("no JSON object in reply")
    depth = 0
    in_string = False
    escaped = False
    for pos in range(start, len(text)):
        ch = text[pos]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                obj = json.loads(text[start:pos + 1])
                if not isinstance(obj, dict):
                    raise ValueError("reply is not a JSON object")
                return obj
    raise ValueError("unbalanced JSON object in reply")


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def parse_timestamp_payload(raw: str, video_id: str, frame_index: int) -> TimestampReply:
    obj = extract_json_object(raw)
    missing = [key for key in TIMESTAMP_FIELDS if key not in obj]
    if missing:
        raise ValueError(f"reply is missing {missing}")
    if obj["video"] != video_id or not _is_int(obj["frame"]) or obj["frame"] != frame_index:
        raise ValueError(f"reply is for {obj['video']}#{obj['frame']}, not {video_id}#{frame_index}")
    if not isinstance(obj["detected"], bool):
        raise ValueError("'detected' must be a boolean")
    if obj["timestamp"] is not None and not isinstance(obj["timestamp"], str):
        raise ValueError("'timestamp' must be a string or null")
    if not isinstance(obj["note"], str):
        raise ValueError("'note' must be a string")
    return TimestampReply(video_id, frame_index, obj["detected"], obj["timestamp"], obj["note"])


def parse_target_payload(raw: str, video_id: str, frame_index: int, person_count: int) -> int:
    obj = extract_json_object(raw)
    missing = [key for key in TARGET_FIELDS if key not in obj]
    if missing:
        raise ValueError(f"reply is missing {missing}")
    if obj["video"] != video_id or obj["frame"] != frame_index:
        raise ValueError(f"reply is for {obj['video']}#{obj['frame']}, not {video_id}#{frame_index}")
    index = obj["target"]
    if not _is_int(index) or not -1 <= index <= person_count - 1:
        raise ValueError(f"target {index!r} outside [-1, {person_count - 1}]")
    return index


def _ask(backend: AgentBackend, request: AgentRequest, parse):
    """One automatic re-query on a malformed or invalid payload, then fail."""
    raw = ""
    for attempt in range(2):
        raw = backend.complete(request)
        try:
            return parse(raw)
        except (ValueError, TypeError) as e:
            logger.warning("Malformed %s reply for %s#%d (attempt %d): %s",
                           request.kind, request.video_id, request.frame_index, attempt + 1, e)
    raise AgentProtocolError(
        f"malformed {request.kind} reply for {request.video_id}#{request.frame_index}", raw=raw
    )


# ======================
# OPERATIONS
# ======================
def query_timestamp(backend: AgentBackend, query: TimestampQuery) -> TimestampReply:
    prompt = load_prompt(TIMESTAMP_PROMPT).format(video_id=query.video_id, frame_index=query.frame_index)
    request = AgentRequest("timestamp", query.video_id, query.frame_index, prompt, query.image)
    return _ask(backend, request, lambda raw: parse_timestamp_payload(raw, query.video_id, query.frame_index))


def query_timestamps(
        backend: AgentBackend,
        queries: Sequence[TimestampQuery],
        max_in_flight: int = MAX_IN_FLIGHT,
) -> dict[tuple[str, int], TimestampReply]:
    """Run queries concurrently; replies are keyed by (video_id, frame_index)."""
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        futures = {query.key: pool.submit(query_timestamp, backend, query) for query in queries}
        return {key: future.result() for key, future in futures.items()}


def query_targets(backend: AgentBackend, query: TargetQuery, max_in_flight: int = MAX_IN_FLIGHT) -> TargetReply:
    if not query.renders:
        raise ValueError("target query needs at least one render")
    template = load_prompt(TARGET_PROMPT)

    def one(render: TargetRender) -> int:
        prompt = template.format(video_id=query.video_id, frame_index=render.frame_index,
                                 person_count=render.person_count)
        request = AgentRequest("target", query.video_id, render.frame_index, prompt, render.image)
        return _ask(backend, request,
                    lambda raw: parse_target_payload(raw, query.video_id, render.frame_index, render.person_count))

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        chosen = list(pool.map(one, query.renders))
    return TargetReply(query.video_id, tuple((r.frame_index, i) for r, i in zip(query.renders, chosen)))


# ======================
# OVERLAYS
# ======================
def render_indexed_poses(image: RasterImage, persons: Sequence[np.ndarray],
                         conf_threshold: float = OVERLAY_CONF) -> RasterImage:
    """Draw skeleton, box and a "P<i>" label per person; colors keyed by index."""
    if not persons:
        return image
    canvas = Image.fromarray(np.ascontiguousarray(image.pixels))
    draw = ImageDraw.Draw(canvas)
    for index, person in enumerate(persons):
        box = bbox_of(person, conf_threshold)
        if box is None:
            continue
        color = PALETTE[index % len(PALETTE)]
        conf = person[:, 2]
        for a, b in COCO_BODY_SKELETON:
            if a < len(person) and b < len(person) and conf[a] >= conf_threshold and conf[b] >= conf_threshold:
                draw.line([tuple(person[a, :2]), tuple(person[b, :2])], fill=color, width=2)
        draw.rectangle([box.x0, box.y0, box.x1, box.y1], outline=color, width=1)
        draw.text((box.x0, max(0.0, box.y0 - LABEL_MARGIN + 2)), f"P{index}", fill=color)
    return RasterImage(np.array(canvas, dtype=np.uint8), image.anonymized)


# ======================
# BACKENDS
# ======================
def _fixture_key(kind: str, video_id: str, frame_index: int) -> tuple[str, str, int]:
    return kind, video_id, int(frame_index)


class FixtureBackend:
    """Replays recorded replies; identical requests always get identical bytes."""

    def __init__(self, fixtures_dir):
        self.fixtures_dir = Path(fixtures_dir)
        self.replies: dict[tuple[str, str, int], str] = {}
        for kind, filename in (("timestamp", TIMESTAMP_FIXTURES), ("target", TARGET_FIXTURES)):
            path = self.fixtures_dir / filename
            if not path.exists():
                continue
            with open(path, "r", encoding="utf-8") as f:
                for line in f:
                    if not line.strip():
                        continue
                    record = json.loads(line)
                    raw = record.pop("raw", None)
                    key = _fixture_key(kind, record["video"], record["frame"])
                    self.replies[key] = raw if raw is not None else json.dumps(record)
        logger.debug("Loaded %d fixture replies from %s", len(self.replies), self.fixtures_dir)

    def complete(self, request: AgentRequest) -> str:
        key = _fixture_key(request.kind, request.video_id, request.frame_index)
        if key not in self.replies:
            raise AgentTransportError(f"no fixture reply for {request.kind} {request.video_id}#{request.frame_index}")
        return self.replies[key]


class HttpBackend:
    """Posts prompt + base64 PNG to a JSON endpoint with a bearer token."""

    def __init__(self, url: str, token: Optional[str], model: str = DEFAULT_MODEL,
                 timeout: float = REQUEST_TIMEOUT, record_dir=None, session: Optional[requests.Session] = None):
        if not token:
            raise RuntimeError("Missing agent bearer token in environment.")
        self.url = url
        self.model = model
        self.timeout = timeout
        self.session = session or requests.Session()
        self.headers = {"Authorization": f"Bearer {token}", "Content-Type": "application/json"}
        self.record_dir = Path(record_dir) if record_dir else None
        self._record_lock = threading.Lock()

    @staticmethod
    def _encode(image: RasterImage) -> str:
        buffer = io.BytesIO()
        Image.fromarray(np.ascontiguousarray(image.pixels)).save(buffer, format="PNG")
        return base64.b64encode(buffer.getvalue()).decode("ascii")

    def _post(self, payload: dict, retry_count: int = 0) -> str:
        try:
            response = self.session.post(self.url, json=payload, headers=self.headers, timeout=self.timeout)
            response.raise_for_status()
            return response.text
        except requests.exceptions.RequestException as e:
            if retry_count < MAX_RETRIES:
                logger.warning("Agent request failed: %s. Retrying (%d/%d)...", e, retry_count + 1, MAX_RETRIES)
                time.sleep(DELAY_BETWEEN_RETRIES)
                return self._post(payload, retry_count + 1)
            raise AgentTransportError(f"agent endpoint unreachable: {e}") from e

    def _record(self, request: AgentRequest, text: str) -> None:
        filename = TIMESTAMP_FIXTURES if request.kind == "timestamp" else TARGET_FIXTURES
        try:
            record = extract_json_object(text)
        except ValueError:
            record = None
        if not isinstance(record, dict) or record.get("video") != request.video_id \
                or record.get("frame") != request.frame_index:
            # replay must find the reply under the request's key and hand back the same text
            logger.debug("Recording %s#%d verbatim: reply does not name its frame", request.video_id,
                         request.frame_index)
            record = {"video": request.video_id, "frame": request.frame_index, "raw": text}
        with self._record_lock:
            self.record_dir.mkdir(parents=True, exist_ok=True)
            with open(self.record_dir / filename, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")

    def complete(self, request: AgentRequest) -> str:
        if request.image is None or not request.image.anonymized:
            raise AgentPrivacyError(
                f"refusing to send {request.video_id}#{request.frame_index}: frame is not anonymized"
            )
        payload = {"model": self.model, "prompt": request.prompt, "image_b64": self._encode(request.image)}
        text = self._post(payload)
        if self.record_dir is not None:
            self._record(request, text)
        return text
