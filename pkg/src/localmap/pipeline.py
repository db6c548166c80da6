"""The local-mapping pipeline: keyframe queue, stage order, backlog-driven
skipping of LBA and keyframe culling, per-stage timing, and the
baseline/optimized mode switch.

Stage order per keyframe: upload -> recent-point cull -> triangulation ->
fusion -> (LBA | skip) -> (keyframe cull | skip). LBA and culling run only
when the queue is empty at their decision point; skips are counted. The
arrival schedule is deterministic (never wall-clock), so both modes process
identical work and produce bit-identical maps and trajectories.
"""

from __future__ import annotations

import hashlib
import time
from collections import deque
from dataclasses import dataclass, field

from .config import PipelineConfig
from .culling import RecentPoint, cull_keyframes, cull_recent_map_points
from .devicestore import DeviceStore
from .errors import InvalidStateError, WindowTooSmallError
from .fusion import run_fusion
from .localba import BAReport, build_local_window, lm_optimize
from .mapmodel import KeyFrame, MapModel
from .parallel import WorkerPool
from .synth import Sequence
from .triangulation import CreationStats, create_map_points


@dataclass
class StageTimings:
    kf_id: int
    upload_ms: float = 0.0
    recent_mp_cull_ms: float = 0.0
    triangulation_ms: float = 0.0
    fusion_ms: float = 0.0
    lba_ms: float = 0.0
    kf_cull_ms: float = 0.0
    total_ms: float = 0.0
    n_keyframes: int = 0
    n_points: int = 0
    queue_depth: int = 0

    STAGE_FIELDS = (
        "upload_ms",
        "recent_mp_cull_ms",
        "triangulation_ms",
        "fusion_ms",
        "lba_ms",
        "kf_cull_ms",
    )

    def stage_sum(self) -> float:
        return sum(getattr(self, f) for f in self.STAGE_FIELDS)

    def as_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.STAGE_FIELDS}
        d.update(
            kf_id=self.kf_id,
            total_ms=self.total_ms,
            n_keyframes=self.n_keyframes,
            n_points=self.n_points,
            queue_depth=self.queue_depth,
        )
        return d


@dataclass
class SkipStats:
    lba_skips: int = 0
    culling_skips: int = 0
    forced_lba_skips: int = 0
    forced_culling_skips: int = 0
    drops: int = 0
    not_admitted: int = 0
    queue_depth_trace: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "lba_skips": self.lba_skips,
            "culling_skips": self.culling_skips,
            "forced_lba_skips": self.forced_lba_skips,
            "forced_culling_skips": self.forced_culling_skips,
            "drops": self.drops,
            "not_admitted": self.not_admitted,
            "queue_depth_trace": list(self.queue_depth_trace),
        }


class LocalMappingPipeline:
    def __init__(self, config: PipelineConfig, num_levels: int = 8):
        self.config = config
        self.model = MapModel(num_levels=num_levels, config=config.map)
        self.store = DeviceStore(config.store)
        self.pool = WorkerPool(config.worker_count)
        self.queue: deque[KeyFrame] = deque()
        self.skips = SkipStats()
        self.timings: list[StageTimings] = []
        self.ba_reports: list[BAReport] = []
        self.creation_stats = CreationStats()
        self.fusion_totals = {"merged": 0, "observations_added": 0, "stale": 0}
        self.culled_keyframes: list[int] = []
        self.culled_points: list[int] = []
        self._recent: list[RecentPoint] = []
        self._processed = 0
        self._last_admitted_frame: int | None = None

    def close(self):
        self.pool.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --- queue -----------------------------------------------------------

    def admit(self, kf: KeyFrame) -> bool:
        """Admission filter + enqueue; models the tracking-side keyframe
        interval, then the fixed queue."""
        if (
            self._last_admitted_frame is not None
            and kf.frame_index - self._last_admitted_frame < self.config.min_kf_interval_frames
        ):
            self.skips.not_admitted += 1
            return False
        accepted = self.enqueue_keyframe(kf)
        if accepted:
            self._last_admitted_frame = kf.frame_index
        return accepted

    def enqueue_keyframe(self, kf: KeyFrame) -> bool:
        if len(self.queue) >= self.config.queue_capacity:
            self.skips.drops += 1
            return False
        self.queue.append(kf)
        return True

    # --- processing --------------------------------------------------------

    def _stage_pad(self, stage: str, t0: float) -> float:
        """Elapsed ms, stretched by the stage's artificial delay multiplier."""
        elapsed = time.perf_counter() - t0
        mult = self.config.stage_delay_multipliers.get(stage, 1.0)
        if mult > 1.0:
            time.sleep(elapsed * (mult - 1.0))
            elapsed = time.perf_counter() - t0
        return elapsed * 1e3

    def process_one(self) -> StageTimings:
        if not self.queue:
            raise InvalidStateError("keyframe queue is empty")
        cfg = self.config
        kf = self.queue.popleft()
        backlog = len(self.queue)
        entry = StageTimings(kf_id=kf.kf_id, queue_depth=backlog)
        self.skips.queue_depth_trace.append(backlog)
        t_start = time.perf_counter()

        t0 = time.perf_counter()
        self.model.insert_keyframe(kf)
        self.store.upload_keyframe(kf)
        entry.upload_ms = self._stage_pad("upload", t0)

        t0 = time.perf_counter()
        removed, self._recent = cull_recent_map_points(
            self.model, self._recent, self._processed, cfg.cull
        )
        self.culled_points.extend(removed)
        entry.recent_mp_cull_ms = self._stage_pad("recent_mp_cull", t0)

        t0 = time.perf_counter()
        created = create_map_points(
            self.model,
            self.store,
            kf.kf_id,
            cfg.match.neighbor_count,
            cfg.match,
            cfg.gates,
            engine=cfg.match_engine,
            pool=self.pool,
            stats=self.creation_stats,
        )
        self._recent.extend(RecentPoint(mp_id, self._processed) for mp_id in created)
        entry.triangulation_ms = self._stage_pad("triangulation", t0)

        t0 = time.perf_counter()
        fused = run_fusion(
            self.model, self.store, kf.kf_id, cfg.fuse, engine=cfg.match_engine, pool=self.pool
        )
        for key in self.fusion_totals:
            self.fusion_totals[key] += fused.get(key, 0)
        entry.fusion_ms = self._stage_pad("fusion", t0)

        t0 = time.perf_counter()
        if cfg.force_skip_lba:
            self.skips.forced_lba_skips += 1
        elif self.queue:
            self.skips.lba_skips += 1
        else:
            try:
                window = build_local_window(self.model, kf.kf_id, cfg.ba)
                self.ba_reports.append(lm_optimize(self.model, window, cfg.ba, self.pool))
            except WindowTooSmallError:
                pass
        entry.lba_ms = self._stage_pad("lba", t0)

        t0 = time.perf_counter()
        if cfg.force_skip_culling:
            self.skips.forced_culling_skips += 1
        elif self.queue:
            self.skips.culling_skips += 1
        else:
            candidates = [
                k for k in self.model.covisible_neighbors(kf.kf_id) if k != kf.kf_id
            ]
            removed_kfs = cull_keyframes(
                self.model, self.store, candidates, impl=cfg.culling_impl, cfg=cfg.cull
            )
            self.culled_keyframes.extend(removed_kfs)
        entry.kf_cull_ms = self._stage_pad("kf_cull", t0)

        self._processed += 1
        entry.total_ms = (time.perf_counter() - t_start) * 1e3
        entry.n_keyframes = len(self.model.live_keyframes())
        entry.n_points = len(self.model.live_points())
        self.timings.append(entry)
        return entry


@dataclass
class RunResult:
    config: PipelineConfig
    trajectory: list[tuple[float, object]]  # (timestamp, world-to-camera SE3Pose)
    timings: list[StageTimings]
    skips: SkipStats
    store: DeviceStore
    model: MapModel
    ba_reports: list[BAReport]
    fusion_totals: dict
    creation_stats: CreationStats
    culled_keyframes: list[int]
    culled_points: list[int]
    audit_violations: list[str]

    def map_fingerprint(self) -> str:
        return map_fingerprint(self.model)


def run_sequence(seq: Sequence, config: PipelineConfig) -> RunResult:
    """Feed a synthetic sequence through the pipeline.

    Non-stress: each admitted keyframe is processed to completion before the
    next arrives. Stress: the queue is topped up to capacity before every
    processing step, so LBA/culling see a standing backlog.
    """
    kfs = seq.to_keyframes()
    with LocalMappingPipeline(config, num_levels=seq.intrinsics().num_levels) as pipe:
        if config.stress:
            i = 0
            while i < len(kfs) or pipe.queue:
                while i < len(kfs) and len(pipe.queue) < config.queue_capacity:
                    pipe.admit(kfs[i])
                    i += 1
                if pipe.queue:
                    pipe.process_one()
        else:
            for kf in kfs:
                if pipe.admit(kf):
                    while pipe.queue:
                        pipe.process_one()
        trajectory = [
            (float(kf.frame_index), kf.pose)
            for kf in sorted(pipe.model.live_keyframes(), key=lambda k: k.kf_id)
        ]
        return RunResult(
            config=config,
            trajectory=trajectory,
            timings=pipe.timings,
            skips=pipe.skips,
            store=pipe.store,
            model=pipe.model,
            ba_reports=pipe.ba_reports,
            fusion_totals=pipe.fusion_totals,
            creation_stats=pipe.creation_stats,
            culled_keyframes=pipe.culled_keyframes,
            culled_points=pipe.culled_points,
            audit_violations=pipe.model.audit(),
        )


def map_fingerprint(model: MapModel) -> str:
    """Canonical digest of live map state (poses, points, observations);
    bitwise-sensitive so mode-equivalence checks are exact."""
    h = hashlib.sha256()
    for kf in sorted(model.live_keyframes(), key=lambda k: k.kf_id):
        h.update(f"kf {kf.kf_id} ".encode())
        h.update(kf.pose.quat.tobytes())
        h.update(kf.pose.trans.tobytes())
        h.update(kf.mp_bindings.tobytes())
    for mp in sorted(model.live_points(), key=lambda p: p.mp_id):
        h.update(f"mp {mp.mp_id} ".encode())
        h.update(mp.position.tobytes())
        h.update(mp.rep_descriptor.tobytes())
        h.update(str(sorted(mp.observations.items())).encode())
        h.update(mp.scale_counts.tobytes())
    return h.hexdigest()
