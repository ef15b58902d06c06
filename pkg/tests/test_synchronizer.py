import json
from fractions import Fraction

import pytest

from markerless.agent_client import FixtureBackend
from markerless.errors import InsufficientDataError, SyncInputError
from markerless.pose_data import ClockSource, FrameClock
from markerless.synchronizer import (
    align_views,
    draw_validation_samples,
    estimate_frame_period,
    fit_drift,
    propagate,
    refine,
    sample_initial,
    synchronize,
    validate,
)
from markerless.synthgen import SceneSpec, generate

START = 51_785_120


def clock(frame: int, fps: float = 30.0, start: int = START) -> int:
    return start + round(Fraction(frame * 1000) / Fraction(fps))


def clocks_of(video: str, stamps) -> list[FrameClock]:
    return [FrameClock(video, i, t) for i, t in enumerate(stamps)]


# ======================
# SAMPLING
# ======================
def test_initial_samples_are_even_and_endpoint_inclusive():
    assert sample_initial(100, 12) == [9 * k for k in range(12)]
    assert sample_initial(2, 12) == [0, 1]
    assert sample_initial(5, 12) == [0, 1, 2, 3, 4]


@pytest.mark.parametrize("frames,budget", [(1, 12), (0, 12), (100, 1)])
def test_initial_sampling_rejects_bad_input(frames, budget):
    with pytest.raises(SyncInputError):
        sample_initial(frames, budget)


# ======================
# DRIFT
# ======================
def test_drift_fit_on_clean_clock():
    drift = fit_drift([(f, clock(f)) for f in range(0, 100, 9)], 30.0)
    assert drift.t0_ms == pytest.approx(START, abs=0.5)
    assert drift.stable_region == (0, 99)
    assert drift.rejected == ()
    assert drift.tol_ms == pytest.approx(20.0)


def test_isolated_spike_is_rejected():
    obs = [(f, clock(f)) for f in range(0, 100, 10)]
    obs[4] = (40, clock(40) + 2000)
    drift = fit_drift(obs, 30.0)
    assert drift.rejected == ((40, clock(40) + 2000),)
    assert 40 not in [f for f, _ in drift.observations]
    assert drift.stable_region == (0, 90)


def test_duplicate_frame_observations_keep_first():
    drift = fit_drift([(0, clock(0)), (0, clock(0) + 5), (10, clock(10))], 30.0)
    assert drift.observations == ((0, clock(0)), (10, clock(10)))


def test_drift_needs_two_observations():
    with pytest.raises(InsufficientDataError):
        fit_drift([(0, START)], 30.0)
    with pytest.raises(SyncInputError):
        fit_drift([(0, START), (1, START + 33)], 0.0)


def _stepped(jump_at: int = 60, jump_ms: int = 100):
    return [(f, clock(f) + (jump_ms if f >= jump_at else 0)) for f in range(0, 100, 10)]


def test_stable_region_is_longest_consistent_run():
    drift = fit_drift(_stepped(), 30.0)
    assert drift.stable_region == (0, 50)


def test_disagreeing_readings_shrink_the_stable_region_to_one_frame():
    drift = fit_drift([(0, 1000), (30, 2100)], 30.0)
    assert drift.residuals == (-50.0, 50.0)
    assert drift.stable_region == (0, 0)
    assert refine(drift) == [15]


def test_refine_bisects_the_jump():
    drift = fit_drift(_stepped(), 30.0)
    assert refine(drift, budget=8) == [55]
    assert refine(drift, budget=8, exclude=[55]) == [54]
    assert refine(drift, budget=0) == []


def test_refine_is_quiet_on_a_clean_clock():
    assert refine(fit_drift([(f, clock(f)) for f in range(0, 100, 9)], 30.0)) == []


# ======================
# PROPAGATION
# ======================
def test_propagation_matches_an_exact_clock():
    obs = [(f, clock(f)) for f in sample_initial(100, 12)]
    clocks = propagate(fit_drift(obs, 30.0), 100, "cam")
    assert [c.timestamp_ms for c in clocks] == [clock(f) for f in range(100)]
    sources = {c.frame_index: c.source for c in clocks}
    assert sources[9] == ClockSource.AGENT_OBSERVED
    assert sources[10] == ClockSource.PROPAGATED


def test_propagation_extrapolates_at_nominal_period():
    clocks = propagate(fit_drift([(10, clock(10)), (20, clock(20))], 30.0), 30)
    assert clocks[0].timestamp_ms == START
    assert clocks[29].timestamp_ms == clock(29)


def test_propagated_clock_is_monotone_across_a_jump():
    clocks = propagate(fit_drift(_stepped(), 30.0), 100)
    stamps = [c.timestamp_ms for c in clocks]
    assert all(b >= a for a, b in zip(stamps, stamps[1:]))


def test_frame_period_estimate():
    assert estimate_frame_period(clocks_of("v", [clock(f) for f in range(30)])) == pytest.approx(33.0, abs=1)
    with pytest.raises(InsufficientDataError):
        estimate_frame_period(clocks_of("v", [START]))


# ======================
# VALIDATION
# ======================
def test_validation_draw_is_seeded_and_avoids_queried_frames():
    drift = fit_drift([(f, clock(f)) for f in sample_initial(300, 12)], 30.0)
    first = draw_validation_samples(drift, 300, budget=6, seed=3)
    assert first == draw_validation_samples(drift, 300, budget=6, seed=3)
    assert len(first) == 6 == len(set(first))
    observed = {f for f, _ in drift.observations}
    assert not observed & set(first)
    assert draw_validation_samples(drift, 300, budget=0) == []


def test_validation_report():
    clocks = clocks_of("v", [clock(f) for f in range(10)])
    good = validate(clocks, [(3, clock(3) + 10), (7, clock(7))], tolerance_ms=50)
    assert good.passed and good.max_error_ms == 10
    bad = validate(clocks, [(3, clock(3) + 80), (7, clock(7))], tolerance_ms=50)
    assert not bad.passed and bad.offending == [3]


# ======================
# ALIGNMENT
# ======================
def test_offset_views_pair_twelve_frames_apart():
    a = clocks_of("a", [clock(f) for f in range(120)])
    b = clocks_of("b", [clock(f, start=START + 400) for f in range(120)])
    pairs = align_views(a, b)
    assert len(pairs) == 108
    assert all(p.frame_a - p.frame_b == 12 and p.delta_ms == 0 and p.matched for p in pairs)


def test_pairs_are_one_to_one():
    a = clocks_of("a", [clock(f, fps=30) for f in range(90)])
    b = clocks_of("b", [clock(f, fps=25, start=START + 7) for f in range(75)])
    pairs = align_views(a, b)
    assert len({p.frame_a for p in pairs}) == len(pairs) == len({p.frame_b for p in pairs})


def test_far_pairs_are_flagged_unmatched():
    a = clocks_of("a", [0, 100, 200, 500, 600])
    b = clocks_of("b", [0, 100, 200, 330, 600])
    pairs = align_views(a, b)
    assert pairs[3].frame_a == 3 and pairs[3].frame_b == 3
    assert pairs[3].delta_ms == -170 and not pairs[3].matched
    assert all(p.matched for p in pairs if p.frame_a != 3)


def test_disjoint_views_have_no_pairs():
    assert align_views(clocks_of("a", [0, 100]), clocks_of("b", [10_000, 10_100])) == []
    assert align_views([], clocks_of("b", [0])) == []


# ======================
# END TO END
# ======================
def _truth(scene):
    return json.loads((scene.truth / "clocks.json").read_text(encoding="utf-8"))


def test_synchronize_recovers_scene_clocks(short_scene):
    backend = FixtureBackend(short_scene.fixtures)
    sync = synchronize(backend, {"cam_a.mp4": (120, 30.0), "cam_b.mp4": (120, 30.0)})
    truth = _truth(short_scene)
    for video_id, view in sync.views.items():
        assert view.validation.passed
        errors = [abs(c.timestamp_ms - t) for c, t in zip(view.clocks, truth[video_id])]
        assert max(errors) <= 1
    matched = [p for p in sync.pairs if p.matched]
    assert len(matched) == 108
    assert all(p.frame_a - p.frame_b == 12 for p in matched)


def test_synchronize_tracks_duplicated_frames(tmp_path):
    spec = SceneSpec(duration_s=4.0, duplicated_frames_a=(30, 60, 90))
    scene = generate(spec, tmp_path)
    sync = synchronize(FixtureBackend(scene.fixtures), {"cam_a.mp4": (120, 30.0), "cam_b.mp4": (120, 30.0)})
    truth = _truth(scene)["cam_a.mp4"]
    errors = [abs(c.timestamp_ms - t) for c, t in zip(sync.clocks("cam_a.mp4"), truth)]
    assert max(errors) <= 17
    assert all(abs(p.delta_ms) <= 17 for p in sync.pairs if p.matched)


def test_synchronize_needs_two_views(short_scene):
    with pytest.raises(SyncInputError):
        synchronize(FixtureBackend(short_scene.fixtures), {"cam_a.mp4": (120, 30.0)})
