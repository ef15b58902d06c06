"""
pipeline.py - Stage sequencing and artifact persistence.

    preproc -> sync -> track (both views at once) -> lift -> angles -> metrics

Each stage writes its artifact under the output directory. With resume=True a stage
whose artifact already exists and parses is loaded instead of recomputed; a stage run
on its own loads its upstream artifacts from disk.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Optional

from tqdm import tqdm

from . import artifacts as art
from .agent_client import AgentBackend, FixtureBackend, HttpBackend
from .config import AgentConfig, PipelineConfig, ViewConfig
from .errors import NoDataError, NoOverlapError, StageError, UndefinedCorrelationError
from .frame_preprocess import RasterImage, load_face_boxes, preprocess_frame_file, read_ppm
from .kinematics import AngleSeries, angle_series_from_skeletons, compare_series, read_angle_csv, write_angle_csv
from .plotting import plot_angles
from .pose_data import PoseTensor, load_pose_jsonl
from .stereo_lifter import lift_sequence
from .synchronizer import synchronize
from .target_tracker import identify_targets, track

logger = logging.getLogger(__name__)

STAGES = ("preproc", "sync", "track", "lift", "angles", "metrics")
PREPROC_DIR = "preproc"


def make_backend(agent: AgentConfig) -> AgentBackend:
    if agent.fixtures is not None:
        return FixtureBackend(agent.fixtures)
    return HttpBackend(agent.url, agent.token(), agent.model, record_dir=agent.record_dir)


def _frame_files(directory: Path) -> dict[int, Path]:
    files = {}
    for path in sorted(directory.glob("*.ppm")):
        try:
            files[int(path.stem)] = path
        except ValueError:
            logger.debug("Skipping %s: name is not a frame index", path)
    return files


class Pipeline:
    def __init__(
            self,
            config: PipelineConfig,
            backend: Optional[AgentBackend] = None,
            resume: bool = False,
            progress: bool = False,
    ):
        self.config = config
        self.out = Path(config.output_dir)
        self.backend = backend
        self.resume = resume
        self.progress = progress
        self.results: dict[str, object] = {}
        self.written: dict[str, list[Path]] = {}
        self._poses: dict[str, PoseTensor] = {}

    # ======================
    # SHARED INPUTS
    # ======================
    @property
    def agent(self) -> AgentBackend:
        if self.backend is None:
            self.backend = make_backend(self.config.agent)
        return self.backend

    def poses(self, view: ViewConfig) -> PoseTensor:
        if view.video_id not in self._poses:
            self._poses[view.video_id] = load_pose_jsonl(view.poses, self.config.num_joints)
        return self._poses[view.video_id]

    def frame_count(self, view: ViewConfig) -> int:
        tensor = self.poses(view)
        return int(tensor.frame_indices.max()) + 1 if tensor.num_frames else 0

    @property
    def preproc_enabled(self) -> bool:
        return self.config.preproc.enabled and self.config.frames_dir is not None

    def frame_loader(self, view: ViewConfig) -> Optional[Callable[[int], RasterImage]]:
        """Agent-bound frames: the anonymized preproc output, or raw frames when preproc is off."""
        if self.config.frames_dir is None:
            return None
        anonymized = self.preproc_enabled
        directory = (self.out / PREPROC_DIR if anonymized else self.config.frames_dir) / view.video_id
        files = _frame_files(directory)

        def load(frame_index: int) -> RasterImage:
            if frame_index not in files:
                raise FileNotFoundError(f"no frame {frame_index} under {directory}")
            return RasterImage(read_ppm(files[frame_index]).pixels, anonymized=anonymized)

        return load

    # ======================
    # DRIVER
    # ======================
    def run(self, stages: Optional[Iterable[str]] = None,
            on_stage: Optional[Callable[[str, list[Path]], None]] = None) -> dict[str, list[Path]]:
        wanted = set(stages) if stages else set(STAGES)
        unknown = wanted - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages: {sorted(unknown)}")

        for name in STAGES:
            if name not in wanted:
                continue
            if name == "preproc" and not self.preproc_enabled:
                logger.info("Skipping preproc: no frames directory or preproc disabled")
                continue
            try:
                if self.resume and self._restore(name):
                    logger.info("Resumed %s from existing artifacts", name)
                else:
                    self.results[name] = getattr(self, f"_run_{name}")()
            except StageError:
                raise
            except Exception as e:
                raise StageError(name, e) from e
            if on_stage is not None:
                on_stage(name, self.written.get(name, []))
        return self.written

    def _require(self, name: str):
        if name not in self.results and not self._restore(name):
            raise StageError(name, FileNotFoundError(f"no usable {name} artifact under {self.out}"))
        return self.results[name]

    def _restore(self, name: str) -> bool:
        views = self.config.views
        if name == "preproc":
            return all(
                len(_frame_files(self.out / PREPROC_DIR / v.video_id))
                >= len(_frame_files(self.config.frames_dir / v.video_id)) > 0
                for v in views
            )
        if name == "sync":
            path = self.out / art.SYNC_FILE
            if not art.is_valid(art.SyncArtifact, path):
                return False
            self.results[name] = art.read_json(art.SyncArtifact, path).to_domain()
        elif name == "track":
            paths = {v.video_id: self.out / art.track_file(v.video_id) for v in views}
            if not all(art.is_valid(art.TrackArtifact, p) for p in paths.values()):
                return False
            self.results[name] = {vid: art.read_json(art.TrackArtifact, p).to_domain() for vid, p in paths.items()}
        elif name == "lift":
            joints, geometry = self.out / art.JOINTS_FILE, self.out / art.GEOMETRY_FILE
            if not (art.joints_valid(joints) and art.is_valid(art.GeometryArtifact, geometry)):
                return False
            self.results[name] = art.read_joints(joints)
        elif name == "angles":
            paths = {t.name: self.out / art.angles_file(t.name) for t in self.config.kinematics.triples}
            if not all(p.exists() for p in paths.values()):
                return False
            self.results[name] = {n: read_angle_csv(p, n) for n, p in paths.items()}
        elif name == "metrics":
            path = self.out / art.METRICS_FILE
            if not art.is_valid(art.MetricsArtifact, path):
                return False
            self.results[name] = art.read_json(art.MetricsArtifact, path)
        return True

    # ======================
    # STAGES
    # ======================
    def _run_preproc(self) -> list[Path]:
        settings = self.config.preproc
        jobs = []
        for view in self.config.views:
            boxes = load_face_boxes(view.face_boxes) if view.face_boxes else {}
            target = self.out / PREPROC_DIR / view.video_id
            for frame, src in _frame_files(self.config.frames_dir / view.video_id).items():
                jobs.append((src, target / f"{frame}.ppm", boxes))
        if not jobs:
            raise NoDataError(f"no .ppm frames under {self.config.frames_dir}")

        def work(job):
            src, dst, boxes = job
            return preprocess_frame_file(src, dst, boxes, settings.clahe_tiles, settings.clip_limit, settings.blur_sigma)

        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            done = list(tqdm(pool.map(work, jobs), total=len(jobs), desc="preproc", disable=not self.progress))
        logger.info("Preprocessed %d frames", len(done))
        self.written["preproc"] = [self.out / PREPROC_DIR]
        return done

    def _run_sync(self):
        views = {v.video_id: (self.frame_count(v), v.fps) for v in self.config.views}
        loaders = {v.video_id: self.frame_loader(v) for v in self.config.views if self.config.frames_dir}
        sync_map = synchronize(self.agent, views, loaders, max_in_flight=self.config.agent.max_in_flight,
                               **self.config.sync.params())
        path = art.write_json(art.SyncArtifact.from_domain(sync_map), self.out / art.SYNC_FILE)
        self.written["sync"] = [path]
        return sync_map

    def _track_view(self, view: ViewConfig):
        tensor = self.poses(view)
        budget = self.config.track.budget_for(tensor.num_frames)
        reply = identify_targets(self.agent, view.video_id, tensor, budget, self.frame_loader(view),
                                 self.config.agent.max_in_flight)
        result = track(tensor, reply, self.config.track.params(self.config.conf_threshold))
        path = art.write_json(art.TrackArtifact.from_domain(view.video_id, result, reply.as_dict()),
                              self.out / art.track_file(view.video_id))
        return view.video_id, result, path

    def _run_track(self):
        with ThreadPoolExecutor(max_workers=2) as pool:
            outcomes = list(pool.map(self._track_view, self.config.views))
        self.written["track"] = [path for _, _, path in outcomes]
        return {video_id: result for video_id, result, _ in outcomes}

    def _run_lift(self):
        sync_map = self._require("sync")
        tracks = self._require("track")
        view_a, view_b = self.config.views
        result = lift_sequence(
            tracks[view_a.video_id], tracks[view_b.video_id],
            self.poses(view_a), self.poses(view_b), sync_map.pairs,
            (view_a.width, view_a.height), (view_b.width, view_b.height),
            sync_map.clocks(view_a.video_id),
            self.config.lift.params(self.config.conf_threshold, self.progress),
        )
        self.written["lift"] = [
            art.write_joints(result.skeletons, self.out / art.JOINTS_FILE),
            art.write_json(art.GeometryArtifact.from_domain(result), self.out / art.GEOMETRY_FILE),
        ]
        return result.skeletons

    def _run_angles(self) -> dict[str, AngleSeries]:
        skeletons = self._require("lift")
        series, paths = {}, []
        for triple in self.config.kinematics.joint_triples():
            series[triple.name] = angle_series_from_skeletons(skeletons, triple)
            paths.append(write_angle_csv(series[triple.name], self.out / art.angles_file(triple.name)))
        self.written["angles"] = paths
        return series

    def _run_metrics(self) -> art.MetricsArtifact:
        series = self._require("angles")
        reference_dir = self.config.kinematics.reference_dir
        reports, skipped, paths = [], {}, []
        for name, estimate in series.items():
            reference = None
            ref_path = reference_dir / art.angles_file(name) if reference_dir else None
            if ref_path is not None and ref_path.exists():
                reference = read_angle_csv(ref_path, name)
                try:
                    reports.append(art.MetricRecord.from_domain(
                        compare_series(estimate, reference, self.config.kinematics.max_gap_ms)))
                except (NoOverlapError, UndefinedCorrelationError, NoDataError) as e:
                    skipped[name] = str(e)
            else:
                skipped[name] = "no reference series"
            try:
                paths.append(plot_angles(estimate, self.out / f"angles_{name}.svg", reference))
            except NoDataError as e:
                logger.warning("No plot for %s: %s", name, e)
        for name, reason in skipped.items():
            logger.warning("Metrics skipped for %s: %s", name, reason)

        metrics = art.MetricsArtifact(reports=reports, skipped=skipped)
        paths.insert(0, art.write_json(metrics, self.out / art.METRICS_FILE))
        self.written["metrics"] = paths
        return metrics


def run_pipeline(config: PipelineConfig, stages: Optional[Iterable[str]] = None, resume: bool = False,
                 backend: Optional[AgentBackend] = None, progress: bool = False,
                 on_stage: Optional[Callable[[str, list[Path]], None]] = None) -> dict[str, list[Path]]:
    config.check_paths()
    return Pipeline(config, backend, resume, progress).run(stages, on_stage)
