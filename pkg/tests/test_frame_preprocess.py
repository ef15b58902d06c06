import json

import numpy as np
import pytest

from markerless.errors import RasterFormatError
from markerless.frame_preprocess import (
    RasterImage,
    blur_boxes,
    clahe,
    enhance_for_agent,
    gray_world,
    load_face_boxes,
    luma,
    preprocess_frame_file,
    read_ppm,
    write_ppm,
)
from markerless.pose_data import Box
from markerless.synthgen import make_ppm_frame


def _solid(rgb, width=16, height=12):
    return RasterImage(np.tile(np.array(rgb, dtype=np.uint8), (height, width, 1)))


def test_ppm_write_then_read(tmp_path):
    image = make_ppm_frame(seed=3)
    write_ppm(image, tmp_path / "0.ppm")
    again = read_ppm(tmp_path / "0.ppm")
    assert again.same_pixels(image)
    assert again.anonymized is False


def test_ppm_header_comments_are_skipped(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# written by hand\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    image = read_ppm(path)
    assert image.pixels.tolist() == [[[1, 2, 3], [4, 5, 6]]]


@pytest.mark.parametrize("raw", [
    b"P3\n1 1\n255\n1 2 3\n",
    b"P6\n1 1\n65535\n" + bytes(6),
    b"P6\n2 2\n255\n" + bytes(5),
    b"P6\n2",
])
def test_bad_ppm_rejected(tmp_path, raw):
    path = tmp_path / "bad.ppm"
    path.write_bytes(raw)
    with pytest.raises(RasterFormatError):
        read_ppm(path)


def test_raster_requires_rgb_bytes():
    with pytest.raises(RasterFormatError):
        RasterImage(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(RasterFormatError):
        RasterImage.from_bytes(2, 2, bytes(11))


def test_gray_world_neutralizes_a_cast():
    balanced = gray_world(_solid((100, 50, 150)))
    assert np.all(balanced.pixels == 100)


def test_gray_world_leaves_empty_channel_alone():
    balanced = gray_world(_solid((120, 0, 60)))
    assert np.all(balanced.pixels[..., 1] == 0)
    assert np.all(balanced.pixels[..., 0] == 60)


def test_clahe_keeps_flat_image():
    flat = _solid((90, 90, 90), 32, 32)
    assert clahe(flat).same_pixels(flat)


def test_clahe_stretches_low_contrast_luma():
    ramp = (100 + np.arange(64) * 40 // 63).astype(np.uint8)
    pixels = np.repeat(np.tile(ramp, (48, 1))[..., None], 3, axis=2)
    image = RasterImage(pixels)
    out = clahe(image)
    assert out.pixels.shape == pixels.shape
    assert luma(out.pixels).std() > luma(pixels).std()
    assert clahe(image).same_pixels(out)


def test_clahe_rejects_bad_parameters():
    with pytest.raises(ValueError):
        clahe(_solid((1, 2, 3)), tiles=(0, 4))
    with pytest.raises(ValueError):
        clahe(_solid((1, 2, 3)), clip_limit=0)


def test_blur_touches_only_the_box():
    image = make_ppm_frame(64, 48, seed=1, face=(10, 10, 30, 30))
    out = blur_boxes(image, [Box(10, 10, 30, 30)])
    mask = np.zeros((48, 64), dtype=bool)
    mask[10:30, 10:30] = True
    assert np.array_equal(out.pixels[~mask], image.pixels[~mask])
    assert not np.array_equal(out.pixels[mask], image.pixels[mask])
    assert out.anonymized


def test_blur_clips_boxes_to_the_image():
    image = make_ppm_frame(32, 24, seed=2, face=(20, 10, 32, 24))
    out = blur_boxes(image, [(20, 10, 100, 100), (-5, -5, -1, -1)])
    assert out.pixels.shape == image.pixels.shape
    assert np.array_equal(out.pixels[:, :20], image.pixels[:, :20])


def test_enhance_marks_anonymized_even_without_faces():
    assert enhance_for_agent(make_ppm_frame(seed=4)).anonymized


def test_face_boxes_and_frame_file(tmp_path):
    (tmp_path / "faces.jsonl").write_text(
        json.dumps({"frame": 5, "boxes": [[8, 8, 24, 24]]}) + "\n", encoding="utf-8")
    boxes = load_face_boxes(tmp_path / "faces.jsonl")
    assert boxes == {5: [Box(8.0, 8.0, 24.0, 24.0)]}

    write_ppm(make_ppm_frame(seed=5, face=(8, 8, 24, 24)), tmp_path / "frames" / "5.ppm")
    dst = preprocess_frame_file(tmp_path / "frames" / "5.ppm", tmp_path / "out" / "5.ppm", boxes)
    processed = read_ppm(dst)
    unblurred = enhance_for_agent(read_ppm(tmp_path / "frames" / "5.ppm"))
    assert not processed.same_pixels(unblurred)
    assert np.array_equal(processed.pixels[30:], unblurred.pixels[30:])
