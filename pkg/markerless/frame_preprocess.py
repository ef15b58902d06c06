"""
frame_preprocess.py - Prepare frames before they leave the machine.

Agent-bound frames get gray-world white balance and CLAHE so the white clock digits
read well, then every supplied face box is Gaussian-blurred. Only blurred frames are
marked anonymized, and only anonymized frames may be sent over HTTP.
"""

import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import RasterFormatError
from .pose_data import Box

logger = logging.getLogger(__name__)

# ======================
# CONFIGURATION
# ======================
CLAHE_TILES = (8, 8)
CLAHE_CLIP_LIMIT = 2.0
BLUR_SIGMA = 6.0  # px, enough to defeat recognition at typical face sizes
GAUSSIAN_TRUNCATE = 4.0

# integer BT.601 luma weights, sum to 256
LUMA_WEIGHTS = (77, 150, 29)


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Row-major 8-bit RGB raster."""

    pixels: np.ndarray
    anonymized: bool = False

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise RasterFormatError(f"expected (H, W, 3) uint8 pixels, got {self.pixels.dtype} {self.pixels.shape}")
        self.pixels.setflags(write=False)

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes, anonymized: bool = False) -> "RasterImage":
        if len(data) != width * height * 3:
            raise RasterFormatError(f"expected {width * height * 3} bytes, got {len(data)}")
        pixels = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()
        return cls(pixels, anonymized)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def data(self) -> bytes:
        return self.pixels.tobytes()

    def same_pixels(self, other: "RasterImage") -> bool:
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))


# ======================
# PPM IO
# ======================
def _ppm_header(raw: bytes) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, data offset)."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise RasterFormatError("truncated PPM header")
        tokens.append(raw[start:pos])
        if len(tokens) == 1 and tokens[0] != b"P6":
            raise RasterFormatError(f"unsupported magic {tokens[0]!r}, only binary P6 is accepted")
    # exactly one whitespace byte separates header from samples
    pos += 1
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise RasterFormatError("non-numeric PPM header field")
    return tokens[0], width, height, maxval, pos


def read_ppm(path) -> RasterImage:
    raw = Path(path).read_bytes()
    _, width, height, maxval, offset = _ppm_header(raw)
    if maxval != 255:
        raise RasterFormatError(f"maxval must be 255, got {maxval}")
    if len(raw) - offset < width * height * 3:
        raise RasterFormatError("truncated PPM sample data")

    with Image.open(io.BytesIO(raw)) as img:
        img.load()
        if img.mode != "RGB" or img.size != (width, height):
            raise RasterFormatError(f"decoded PPM is {img.mode} {img.size}")
        pixels = np.array(img, dtype=np.uint8)
    return RasterImage(pixels)


def write_ppm(image: RasterImage, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image.pixels)).save(path, format="PPM")


def load_face_boxes(path) -> dict[int, list[Box]]:
    """Read face boxes, one {"frame": int, "boxes": [[x0, y0, x1, y1], ...]} per line."""
    boxes: dict[int, list[Box]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            boxes.setdefault(int(record["frame"]), []).extend(Box(*map(float, b)) for b in record["boxes"])
    return boxes


# ======================
# COLOR
# ======================
def gray_world(image: RasterImage) -> RasterImage:
    """Scale each channel by (global mean / channel mean); zero-mean channels untouched."""
    if image.width == 0 or image.height == 0:
        raise ValueError("gray_world needs a non-empty image")
    px = image.pixels.astype(np.float64)
    means = px.reshape(-1, 3).mean(axis=0)
    global_mean = means.mean()
    scales = np.ones(3)
    nonzero = means > 0
    scales[nonzero] = global_mean / means[nonzero]
    out = np.clip(np.rint(px * scales), 0, 255).astype(np.uint8)
    return RasterImage(out, image.anonymized)


def luma(pixels: np.ndarray) -> np.ndarray:
    r, g, b = (pixels[..., c].astype(np.int32) for c in range(3))
    wr, wg, wb = LUMA_WEIGHTS
    return (wr * r + wg * g + wb * b + 128) >> 8


def _tile_lut(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
    total = float(tile.size)
    if np.count_nonzero(hist) <= 1:
        # nothing to stretch
        return np.arange(256, dtype=np.float64)

    limit = max(clip_limit * total / 256.0, 1.0)
    excess = np.clip(hist - limit, 0.0, None).sum()
    hist = np.minimum(hist, limit) + excess / 256.0

    cdf = np.cumsum(hist)
    cdf_min = cdf[np.flatnonzero(hist)[0]]
    denom = cdf[-1] - cdf_min
    if denom <= 0:
        return np.arange(256, dtype=np.float64)
    return np.clip((cdf - cdf_min) / denom * 255.0, 0.0, 255.0)


def _blend_weights(length: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    centers = (edges[:-1] + edges[1:]) / 2.0
    pos = np.arange(length) + 0.5
    upper = np.searchsorted(centers, pos)
    lo = np.clip(upper - 1, 0, len(centers) - 1)
    hi = np.clip(upper, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    weight = np.where(hi != lo, (pos - centers[lo]) / np.where(span == 0, 1.0, span), 0.0)
    return lo, hi, weight


def clahe(image: RasterImage, tiles: Sequence[int] = CLAHE_TILES, clip_limit: float = CLAHE_CLIP_LIMIT) -> RasterImage:
    """Contrast-limited adaptive histogram equalization of luma; chroma offsets kept."""
    if tiles[0] < 1 or tiles[1] < 1:
        raise ValueError("tile grid must be at least 1x1")
    if clip_limit <= 0:
        raise ValueError("clip_limit must be positive")

    H, W = image.height, image.width
    ty, tx = min(tiles[0], H), min(tiles[1], W)
    y = luma(image.pixels)
    y_edges = (np.arange(ty + 1) * H) // ty
    x_edges = (np.arange(tx + 1) * W) // tx

    luts = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            tile = y[y_edges[i]:y_edges[i + 1], x_edges[j]:x_edges[j + 1]]
            luts[i, j] = _tile_lut(tile, clip_limit)

    i0, i1, wy = _blend_weights(H, y_edges.astype(np.float64))
    j0, j1, wx = _blend_weights(W, x_edges.astype(np.float64))
    i0, i1, wy = i0[:, None], i1[:, None], wy[:, None]
    j0, j1, wx = j0[None, :], j1[None, :], wx[None, :]

    top = (1 - wx) * luts[i0, j0, y] + wx * luts[i0, j1, y]
    bottom = (1 - wx) * luts[i1, j0, y] + wx * luts[i1, j1, y]
    new_y = np.rint((1 - wy) * top + wy * bottom).astype(np.int32)

    out = image.pixels.astype(np.int32) + (new_y - y)[..., None]
    return RasterImage(np.clip(out, 0, 255).astype(np.uint8), image.anonymized)


# ======================
# PRIVACY
# ======================
def blur_boxes(image: RasterImage, boxes: Iterable[Sequence[float]], sigma: float = BLUR_SIGMA) -> RasterImage:
    """Gaussian-blur inside each box (clipped to the image); other pixels untouched."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = image.pixels.copy()
    H, W = image.height, image.width
    for box in boxes:
        x0 = max(0, int(math.floor(box[0])))
        y0 = max(0, int(math.floor(box[1])))
        x1 = min(W, int(math.ceil(box[2])))
        y1 = min(H, int(math.ceil(box[3])))
        if x1 <= x0 or y1 <= y0:
            continue
        region = out[y0:y1, x0:x1].astype(np.float64)
        blurred = gaussian_filter(region, sigma=(sigma, sigma, 0), mode="nearest", truncate=GAUSSIAN_TRUNCATE)
        out[y0:y1, x0:x1] = np.clip(np.rint(blurred), 0, 255).astype(np.uint8)
    return RasterImage(out, anonymized=True)


def enhance_for_agent(
        image: RasterImage,
        face_boxes: Optional[Sequence[Box]] = None,
        tiles: Sequence[int] = CLAHE_TILES,
        clip_limit: float = CLAHE_CLIP_LIMIT,
        sigma: float = BLUR_SIGMA,
) -> RasterImage:
    """gray world -> CLAHE -> face blur; the result is flagged anonymized."""
    balanced = gray_world(image)
    enhanced = clahe(balanced, tiles, clip_limit)
    return blur_boxes(enhanced, face_boxes or [], sigma)


def preprocess_frame_file(
        src: Path,
        dst: Path,
        frame_boxes: Mapping[int, Sequence[Box]],
        tiles: Sequence[int] = CLAHE_TILES,
        clip_limit: float = CLAHE_CLIP_LIMIT,
        sigma: float = BLUR_SIGMA,
) -> Path:
    """Enhance one frame file named <frame index>.ppm and write it to dst."""
    frame_index = int(src.stem)
    image = enhance_for_agent(read_ppm(src), frame_boxes.get(frame_index, []), tiles, clip_limit, sigma)
    write_ppm(image, dst)
    return dst
