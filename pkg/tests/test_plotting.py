import hashlib
from pathlib import Path

import matplotlib
import numpy as np
import pytest

from markerless.errors import NoDataError
from markerless.kinematics import AngleSeries
from markerless.plotting import REFERENCE_COLOR, plot_angles


def _wave(step_ms, offset=0.0):
    stamps = np.arange(51_785_120, 51_785_120 + 4000, step_ms, dtype=np.int64)
    return AngleSeries("left_knee", stamps, 117.5 + 57.5 * np.cos(stamps / 1000.0 * np.pi) + offset)


def test_plot_is_an_svg_with_labels(tmp_path):
    path = plot_angles(_wave(33), tmp_path / "angles_left_knee.svg")
    text = path.read_text(encoding="utf-8")
    assert text.lstrip().startswith("<?xml")
    assert "Time (s)" in text and "Angle (deg)" in text
    assert REFERENCE_COLOR not in text


def test_reference_is_drawn_in_red(tmp_path):
    path = plot_angles(_wave(33), tmp_path / "k.svg", reference=_wave(10, offset=2.0))
    assert REFERENCE_COLOR in path.read_text(encoding="utf-8")


def test_plot_bytes_are_reproducible(tmp_path):
    first = plot_angles(_wave(33), tmp_path / "one.svg", reference=_wave(10)).read_bytes()
    second = plot_angles(_wave(33), tmp_path / "two.svg", reference=_wave(10)).read_bytes()
    assert first == second


def test_nothing_to_plot(tmp_path):
    empty = AngleSeries("k", np.array([1, 2], dtype=np.int64), np.array([np.nan, np.nan]))
    with pytest.raises(NoDataError):
        plot_angles(empty, tmp_path / "k.svg")
    assert not (tmp_path / "k.svg").exists()


GOLDEN_DIR = Path(__file__).parent / "golden"


def test_plot_matches_the_golden_hash(tmp_path):
    data = plot_angles(_wave(33), tmp_path / "left_knee.svg", reference=_wave(10, offset=2.0)).read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    # the SVG writer's output changes between matplotlib releases, so each release has its own golden file
    golden = GOLDEN_DIR / f"angles_left_knee.matplotlib-{matplotlib.__version__}.sha256"
    if not golden.exists():
        golden.parent.mkdir(parents=True, exist_ok=True)
        golden.write_text(digest + "\n", encoding="utf-8")
        pytest.skip(f"recorded {golden.name}; commit it")
    assert digest == golden.read_text(encoding="utf-8").strip()
