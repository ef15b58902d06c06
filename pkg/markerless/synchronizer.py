"""
synchronizer.py - Put every frame of every view on the shared visual clock.

The agent reads the on-screen timer on a few frames; everything else is
propagated from those readings:

    sample_initial -> fit_drift -> (refine -> query -> fit_drift) x rounds
                   -> propagate -> validate

and the two propagated timelines are paired frame-by-frame with align_views.
"""

import bisect
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .agent_client import AgentBackend, TimestampQuery, parse_clock_string, query_timestamps
from .errors import ClockParseError, InsufficientDataError, SyncInputError
from .frame_preprocess import RasterImage
from .pose_data import DAY_MS, ClockSource, FrameClock

logger = logging.getLogger(__name__)

# ======================
# CONFIGURATION
# ======================
INITIAL_BUDGET = 12
REFINE_BUDGET = 8
REFINE_ROUNDS = 8
VALIDATION_BUDGET = 6
VALIDATION_TOLERANCE_MS = 50.0
TOL_PERIOD_FRACTION = 0.6  # stable-region residual tolerance, in frame periods
DEFAULT_SEED = 0

Observation = tuple[int, int]  # (frame_index, timestamp_ms)


# ======================
# TYPES
# ======================
@dataclass(frozen=True)
class DriftModel:
    nominal_fps: float
    observations: tuple[Observation, ...]
    residuals: tuple[float, ...]
    stable_region: tuple[int, int]  # inclusive frame interval
    t0_ms: float
    tol_ms: float
    rejected: tuple[Observation, ...] = ()

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.nominal_fps


@dataclass(frozen=True)
class ValidationSample:
    frame_index: int
    propagated_ms: int
    observed_ms: int

    @property
    def error_ms(self) -> int:
        return abs(self.propagated_ms - self.observed_ms)


@dataclass(frozen=True)
class ValidationReport:
    samples: tuple[ValidationSample, ...]
    tolerance_ms: float

    @property
    def max_error_ms(self) -> int:
        return max((s.error_ms for s in self.samples), default=0)

    @property
    def passed(self) -> bool:
        return self.max_error_ms <= self.tolerance_ms

    @property
    def offending(self) -> list[int]:
        return [s.frame_index for s in self.samples if s.error_ms > self.tolerance_ms]


@dataclass(frozen=True)
class FramePair:
    frame_a: int
    frame_b: int
    delta_ms: int
    matched: bool = True


@dataclass(frozen=True)
class VideoSync:
    video_id: str
    drift: DriftModel
    clocks: tuple[FrameClock, ...]
    validation: ValidationReport
    queried: tuple[int, ...] = ()


@dataclass(frozen=True)
class SyncMap:
    views: dict[str, VideoSync]
    pairs: tuple[FramePair, ...] = field(default_factory=tuple)

    def clocks(self, video_id: str) -> tuple[FrameClock, ...]:
        return self.views[video_id].clocks


# ======================
# SAMPLING
# ======================
def sample_initial(frame_count: int, budget: int = INITIAL_BUDGET) -> list[int]:
    """Endpoint-inclusive even spacing: round(k (T-1) / (budget-1)), half to even."""
    if frame_count < 2:
        raise SyncInputError(f"need at least 2 frames, got {frame_count}")
    if budget < 2:
        raise SyncInputError(f"sampling budget must be >= 2, got {budget}")
    if budget >= frame_count:
        return list(range(frame_count))
    return sorted({round(Fraction(k * (frame_count - 1), budget - 1)) for k in range(budget)})


# ======================
# DRIFT
# ======================
def _offsets(observations: Sequence[Observation], period: float) -> np.ndarray:
    frames = np.array([f for f, _ in observations], dtype=np.float64)
    stamps = np.array([t for _, t in observations], dtype=np.float64)
    return stamps - frames * period


def _spikes(residuals: np.ndarray, tol_ms: float) -> list[int]:
    """Interior observations that disagree with both neighbours while the neighbours agree."""
    spikes = []
    for i in range(1, len(residuals) - 1):
        prev, cur, nxt = residuals[i - 1], residuals[i], residuals[i + 1]
        if abs(cur - prev) > tol_ms and abs(cur - nxt) > tol_ms and abs(prev - nxt) <= tol_ms:
            spikes.append(i)
    return spikes


def _longest_run(mask: np.ndarray) -> tuple[int, int]:
    best = (0, -1)
    start = None
    for i, ok in enumerate(list(mask) + [False]):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            if i - start > best[1] - best[0] + 1:
                best = (start, i - 1)
            start = None
    return best


def fit_drift(
        observations: Iterable[Observation],
        nominal_fps: float,
        tol_ms: Optional[float] = None,
) -> DriftModel:
    """Median-offset fit of t0 + i * period with isolated-spike rejection."""
    if nominal_fps <= 0:
        raise SyncInputError("nominal_fps must be positive")
    by_frame: dict[int, int] = {}
    for frame, stamp in observations:
        by_frame.setdefault(int(frame), int(stamp))
    obs = sorted(by_frame.items())
    if len(obs) < 2:
        raise InsufficientDataError(f"drift fit needs >= 2 observations, got {len(obs)}")

    period = 1000.0 / nominal_fps
    tol = TOL_PERIOD_FRACTION * period if tol_ms is None else float(tol_ms)

    offsets = _offsets(obs, period)
    rejected = []
    spikes = _spikes(offsets - np.median(offsets), tol)
    if spikes and len(obs) - len(spikes) >= 2:
        rejected = [obs[i] for i in spikes]
        obs = [o for i, o in enumerate(obs) if i not in set(spikes)]
        offsets = _offsets(obs, period)
        logger.debug("Rejected %d isolated clock readings: %s", len(rejected), rejected)

    t0 = float(np.median(offsets))
    residuals = offsets - t0
    spread = np.abs(residuals - np.median(residuals))
    start, end = _longest_run(spread <= tol)
    if end < start:
        # no reading agrees with the median; the closest one is the whole stable region
        start = end = int(np.argmin(spread))
        logger.warning("No clock reading within %.1f ms of the median offset; stable region is frame %d only",
                       tol, obs[start][0])
    stable = (obs[start][0], obs[end][0])
    return DriftModel(nominal_fps, tuple(obs), tuple(float(r) for r in residuals), stable, t0, tol, tuple(rejected))


def refine(drift: DriftModel, budget: int = REFINE_BUDGET, exclude: Iterable[int] = ()) -> list[int]:
    """
    Bisect every gap between consecutive observations whose residuals jump by more
    than tol_ms; gaps closest to the stable region come first.
    """
    if budget <= 0:
        return []
    excluded = set(exclude) | {f for f, _ in drift.observations} | {f for f, _ in drift.rejected}
    s0, s1 = drift.stable_region

    candidates = []
    for (fa, _), (fb, _), ra, rb in zip(drift.observations, drift.observations[1:],
                                        drift.residuals, drift.residuals[1:]):
        if abs(rb - ra) <= drift.tol_ms or fb - fa < 2:
            continue
        mid = (fa + fb) // 2
        # nearest free frame strictly inside the gap
        inside = sorted(range(fa + 1, fb), key=lambda f: (abs(f - mid), f))
        pick = next((f for f in inside if f not in excluded), None)
        if pick is None:
            continue
        distance = 0 if fb >= s0 and fa <= s1 else min(abs(fa - s1), abs(s0 - fb))
        candidates.append((distance, fa, pick))

    candidates.sort()
    return sorted(pick for _, _, pick in candidates[:budget])


# ======================
# PROPAGATION
# ======================
def _period_fraction(nominal_fps: float) -> Fraction:
    return Fraction(1000) / Fraction(nominal_fps).limit_denominator(10_000)


def _clamp_day(ms: int) -> int:
    return min(max(ms, 0), DAY_MS - 1)


def propagate(drift: DriftModel, frame_count: int, video_id: str = "") -> list[FrameClock]:
    """Piecewise-linear between observations; nominal period outside them."""
    if frame_count < 1:
        raise SyncInputError("frame_count must be >= 1")
    obs = drift.observations
    frames = [f for f, _ in obs]
    observed = dict(obs)
    period = _period_fraction(drift.nominal_fps)

    clocks = []
    for i in range(frame_count):
        if i in observed:
            clocks.append(FrameClock(video_id, i, observed[i], ClockSource.AGENT_OBSERVED))
            continue
        k = bisect.bisect_left(frames, i)
        if k == 0:
            f0, t0 = obs[0]
            ms = t0 - round((f0 - i) * period)
        elif k == len(frames):
            fn, tn = obs[-1]
            ms = tn + round((i - fn) * period)
        else:
            (fa, ta), (fb, tb) = obs[k - 1], obs[k]
            ms = ta + round(Fraction((i - fa) * (tb - ta), fb - fa))
        clocks.append(FrameClock(video_id, i, _clamp_day(ms), ClockSource.PROPAGATED))
    return clocks


def estimate_frame_period(clocks: Sequence[FrameClock]) -> float:
    stamps = np.array([c.timestamp_ms for c in clocks if c.timestamp_ms is not None], dtype=np.float64)
    if len(stamps) < 2:
        raise InsufficientDataError("need two timestamps to estimate a frame period")
    return float(np.median(np.diff(stamps)))


# ======================
# VALIDATION
# ======================
def draw_validation_samples(
        drift: DriftModel,
        frame_count: int,
        budget: int = VALIDATION_BUDGET,
        seed: int = DEFAULT_SEED,
        exclude: Iterable[int] = (),
) -> list[int]:
    """Seeded draw from three pools: inside the stable region, its boundaries, anywhere."""
    if budget <= 0:
        return []
    rng = np.random.default_rng(seed)
    taken = set(exclude) | {f for f, _ in drift.observations} | {f for f, _ in drift.rejected}
    s0, s1 = drift.stable_region

    stable_pool = [f for f in range(s0, s1 + 1) if f not in taken]
    boundary = {s0 - 1, s0, s0 + 1, s1 - 1, s1, s1 + 1, 0, 1, frame_count - 2, frame_count - 1}
    boundary_pool = sorted(f for f in boundary if 0 <= f < frame_count and f not in taken)

    shares = [budget // 3 + (1 if i < budget % 3 else 0) for i in range(3)]
    picked: list[int] = []

    def draw(pool: list[int], k: int):
        pool = [f for f in pool if f not in picked]
        if k <= 0 or not pool:
            return
        picked.extend(int(f) for f in rng.choice(pool, size=min(k, len(pool)), replace=False))

    draw(stable_pool, shares[0])
    draw(boundary_pool, shares[1])
    random_pool = [f for f in range(frame_count) if f not in taken]
    draw(random_pool, budget - len(picked))
    return sorted(picked)


def validate(
        clocks: Sequence[FrameClock],
        observations: Iterable[Observation],
        tolerance_ms: float = VALIDATION_TOLERANCE_MS,
) -> ValidationReport:
    by_frame = {c.frame_index: c for c in clocks}
    samples = []
    for frame, stamp in sorted(observations):
        clock = by_frame.get(frame)
        if clock is None or clock.timestamp_ms is None:
            continue
        samples.append(ValidationSample(frame, clock.timestamp_ms, int(stamp)))
    report = ValidationReport(tuple(samples), tolerance_ms)
    if not report.passed:
        logger.warning("Clock validation failed at frames %s (max error %d ms)", report.offending, report.max_error_ms)
    return report


# ======================
# CROSS-VIEW ALIGNMENT
# ======================
def align_views(
        clocks_a: Sequence[FrameClock],
        clocks_b: Sequence[FrameClock],
) -> list[FramePair]:
    """Greedy one-to-one nearest-timestamp pairing; |dt| > half a frame period is unmatched."""
    a = [(c.frame_index, c.timestamp_ms) for c in clocks_a if c.timestamp_ms is not None]
    b = [(c.frame_index, c.timestamp_ms) for c in clocks_b if c.timestamp_ms is not None]
    if not a or not b:
        logger.warning("Cannot align views: a timeline is empty")
        return []

    half = max(_median_step(a), _median_step(b)) / 2.0
    ta = np.array([t for _, t in a])
    tb = np.array([t for _, t in b])
    if ta.max() + half < tb.min() or tb.max() + half < ta.min():
        logger.warning("Views do not overlap in time (%d-%d ms vs %d-%d ms)", ta.min(), ta.max(), tb.min(), tb.max())
        return []

    candidates = set()
    for i, j in _nearest(ta, tb):
        candidates.add((i, j))
    for j, i in _nearest(tb, ta):
        candidates.add((i, j))

    ranked = sorted(
        candidates,
        key=lambda ij: (abs(int(ta[ij[0]]) - int(tb[ij[1]])), int(ta[ij[0]]) + int(tb[ij[1]]),
                        a[ij[0]][0] + b[ij[1]][0], abs(a[ij[0]][0] - b[ij[1]][0])),
    )
    used_a, used_b = set(), set()
    pairs = []
    for i, j in ranked:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        delta = int(tb[j]) - int(ta[i])
        pairs.append(FramePair(a[i][0], b[j][0], delta, abs(delta) <= half))
    pairs.sort(key=lambda p: (p.frame_a, p.frame_b))
    return pairs


def _median_step(frames_stamps: Sequence[tuple[int, int]]) -> float:
    if len(frames_stamps) < 2:
        return 0.0
    stamps = np.array([t for _, t in frames_stamps], dtype=np.float64)
    frames = np.array([f for f, _ in frames_stamps], dtype=np.float64)
    return float(np.median(np.diff(stamps) / np.maximum(np.diff(frames), 1)))


def _nearest(src: np.ndarray, dst: np.ndarray) -> list[tuple[int, int]]:
    """For each src sample, the dst samples bracketing it (sorted timestamps)."""
    order = np.argsort(dst, kind="stable")
    sorted_dst = dst[order]
    out = []
    for i, t in enumerate(src):
        k = int(np.searchsorted(sorted_dst, t))
        for cand in (k - 1, k):
            if 0 <= cand < len(sorted_dst):
                out.append((i, int(order[cand])))
    return out


# ======================
# ORCHESTRATION
# ======================
def _collect(
        backend: AgentBackend,
        video_id: str,
        frames: Sequence[int],
        frame_count: int,
        frame_loader: Optional[Callable[[int], RasterImage]],
        max_in_flight: int,
) -> dict[int, Optional[int]]:
    """Query the clock on frames; unreadable or undetected clocks map to None."""
    queries = [
        TimestampQuery(video_id, f, frame_loader(f) if frame_loader else None, frame_count) for f in frames
    ]
    replies = query_timestamps(backend, queries, max_in_flight)
    readings: dict[int, Optional[int]] = {}
    for f in frames:
        reply = replies[(video_id, f)]
        if not reply.detected or reply.timestamp_raw is None:
            readings[f] = None
            continue
        try:
            readings[f] = parse_clock_string(reply.timestamp_raw)
        except ClockParseError as e:
            logger.warning("%s#%d: %s; reading discarded", video_id, f, e)
            readings[f] = None
    return readings


def synchronize_video(
        backend: AgentBackend,
        video_id: str,
        frame_count: int,
        nominal_fps: float,
        frame_loader: Optional[Callable[[int], RasterImage]] = None,
        initial_budget: int = INITIAL_BUDGET,
        refine_budget: int = REFINE_BUDGET,
        refine_rounds: int = REFINE_ROUNDS,
        validation_budget: int = VALIDATION_BUDGET,
        validation_tolerance_ms: float = VALIDATION_TOLERANCE_MS,
        tol_ms: Optional[float] = None,
        seed: int = DEFAULT_SEED,
        max_in_flight: int = 4,
) -> VideoSync:
    readings = _collect(backend, video_id, sample_initial(frame_count, initial_budget),
                        frame_count, frame_loader, max_in_flight)

    def observed() -> list[Observation]:
        return [(f, t) for f, t in readings.items() if t is not None]

    drift = fit_drift(observed(), nominal_fps, tol_ms)
    for round_index in range(refine_rounds):
        extra = refine(drift, refine_budget, exclude=readings.keys())
        if not extra:
            break
        logger.debug("%s refinement round %d: frames %s", video_id, round_index + 1, extra)
        readings.update(_collect(backend, video_id, extra, frame_count, frame_loader, max_in_flight))
        drift = fit_drift(observed(), nominal_fps, tol_ms)

    clocks = propagate(drift, frame_count, video_id)
    samples = draw_validation_samples(drift, frame_count, validation_budget, seed, exclude=readings.keys())
    checks = _collect(backend, video_id, samples, frame_count, frame_loader, max_in_flight)
    report = validate(clocks, [(f, t) for f, t in checks.items() if t is not None], validation_tolerance_ms)

    confirmed = {s.frame_index for s in report.samples if s.error_ms <= validation_tolerance_ms}
    clocks = [replace(c, source=ClockSource.VALIDATED) if c.frame_index in confirmed else c for c in clocks]
    logger.info("%s: %d clock readings, stable frames %d-%d, validation max error %d ms",
                video_id, len(drift.observations), *drift.stable_region, report.max_error_ms)
    return VideoSync(video_id, drift, tuple(clocks), report, tuple(sorted(set(readings) | set(checks))))


def synchronize(
        backend: AgentBackend,
        views: Mapping[str, tuple[int, float]],
        frame_loaders: Optional[Mapping[str, Callable[[int], RasterImage]]] = None,
        **params,
) -> SyncMap:
    """views: video_id -> (frame_count, nominal_fps); exactly two views are paired."""
    if len(views) != 2:
        raise SyncInputError(f"synchronization pairs exactly two views, got {len(views)}")
    loaders = frame_loaders or {}
    synced = {
        video_id: synchronize_video(backend, video_id, count, fps, loaders.get(video_id), **params)
        for video_id, (count, fps) in views.items()
    }
    first, second = list(synced)
    pairs = align_views(synced[first].clocks, synced[second].clocks)
    matched = sum(p.matched for p in pairs)
    logger.info("Aligned %s and %s: %d pairs (%d matched)", first, second, len(pairs), matched)
    return SyncMap(synced, tuple(pairs))
