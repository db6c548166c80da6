"""Configuration dataclasses for every pipeline stage.

Defaults follow ORB-feature-pipeline conventions so the engine behaves like
the systems it models; every threshold is overridable per run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass
class GateConfig:
    """Map-point creation gates (parallax, depth, reprojection, scale)."""

    cos_parallax_max: float = 0.9998
    chi2_mono: float = 5.991  # chi-square, 2 dof, 95%
    scale_ratio_slack: float = 1.5


@dataclass
class MatchConfig:
    """Descriptor matching for the triangulation search."""

    match_max_distance: int = 50
    chi2_epi: float = 3.84  # chi-square, 1 dof, 95%
    level_window: int = 1
    neighbor_count: int = 10
    chunk_size: int = 256


@dataclass
class FuseConfig:
    """Duplicate map-point fusion."""

    match_max_distance: int = 50
    fuse_radius: float = 3.0  # px at pyramid level 0
    min_view_cos: float = 0.5
    dist_band_slack: float = 1.5
    level_window: int = 1
    n1: int = 20  # first-order neighbor count
    n2: int = 5  # second-order neighbors taken per first-order neighbor
    chunk_size: int = 512


@dataclass
class BAConfig:
    """Local bundle adjustment (Levenberg-Marquardt over a covisibility window)."""

    window_size: int = 10
    fixed_cap: int = 20
    huber_delta: float = math.sqrt(5.991)
    lambda0: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 2.0
    lambda_max: float = 1e8
    max_iters: int = 10
    cost_tol: float = 1e-6
    chunk_size: int = 1024


@dataclass
class CullConfig:
    """Recent map-point culling and redundant keyframe culling."""

    found_ratio_min: float = 0.25
    probation_kfs: int = 3
    min_obs_graduate: int = 3
    redundancy_ratio: float = 0.9
    min_redundant_observers: int = 3
    scale_tolerance_levels: int = 0


@dataclass
class StoreConfig:
    """Device-resident keyframe storage model."""

    keypoint_record_bytes: int = 16
    descriptor_bytes: int = 32
    map_point_record_bytes: int = 100
    capacity: int = 4096


@dataclass
class MapConfig:
    """Mutable map bookkeeping."""

    min_obs_keep: int = 2
    min_covis_weight: int = 1


BASELINE = "baseline"
OPTIMIZED = "optimized"


@dataclass
class PipelineConfig:
    """Whole-pipeline switchboard.

    Baseline mode pins worker_count to 1, runs the sequential reference
    matchers and the observation-scan culling. Optimized mode runs the
    chunked data-parallel kernels and the counter-array culling fast path.
    Both modes produce bit-identical maps and trajectories.
    """

    mode: str = BASELINE
    worker_count: int = 1
    queue_capacity: int = 3
    stress: bool = False
    # None resolves to 10 normally, 1 under stress ("denser keyframe insertion")
    min_kf_interval_frames: int | None = None
    force_skip_lba: bool = False
    force_skip_culling: bool = False
    # wall-time calibration for stress experiments: {"lba": 2.0} doubles the
    # apparent LBA cost; results are unaffected, only timings stretch
    stage_delay_multipliers: dict = field(default_factory=dict)
    gates: GateConfig = field(default_factory=GateConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    ba: BAConfig = field(default_factory=BAConfig)
    cull: CullConfig = field(default_factory=CullConfig)
    store: StoreConfig = field(default_factory=StoreConfig)
    map: MapConfig = field(default_factory=MapConfig)

    def __post_init__(self):
        if self.mode not in (BASELINE, OPTIMIZED):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == BASELINE:
            self.worker_count = 1
        self.worker_count = max(1, int(self.worker_count))
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.min_kf_interval_frames is None:
            self.min_kf_interval_frames = 1 if self.stress else 10

    @property
    def culling_impl(self) -> str:
        return "baseline" if self.mode == BASELINE else "fast"

    @property
    def match_engine(self) -> str:
        return "reference" if self.mode == BASELINE else "batch"
