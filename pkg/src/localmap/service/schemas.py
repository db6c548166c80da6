"""Pydantic request/response models for the local-mapping service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class GenerateRequest(BaseModel):
    out: str
    seed: int = 0
    landmarks: int = 400
    keyframes: int = 30
    features: int = 300
    noise: float = 0.0  # pixel noise sigma (px)
    duplicates: float = 0.0  # fraction of landmarks instantiated twice
    trajectory: str = "line"
    extent: float = 20.0
    descriptor_flip_bits: int = 0
    spurious_fraction: float = 0.0
    twin_flip_bits: int = 45
    pose_noise_trans: float | None = None
    pose_noise_rot_deg: float | None = None
    min_covisible: int = 20
    write_gt: bool = True


class GenerateResponse(BaseModel):
    path: str
    gt_path: str | None
    keyframes: int
    landmarks: int
    duplicate_pairs: int
    sha256: str


class RunRequest(BaseModel):
    seq: str
    mode: str = "baseline"
    workers: int = 1
    stress: bool = False
    repeat: int = Field(default=1, ge=1)
    out: str | None = None
    traj: str | None = None
    queue_capacity: int = 3
    min_kf_interval_frames: int | None = None
    force_skip_lba: bool = False
    force_skip_culling: bool = False
    match_max_distance: int | None = None
    fuse_max_distance: int | None = None
    fuse_n1: int | None = None
    fuse_n2: int | None = None
    triangulation_neighbors: int | None = None


class RunResponse(BaseModel):
    report: dict
    out_path: str | None
    traj_path: str | None


class CompareRequest(BaseModel):
    baseline: str | None = None  # report path
    optimized: str | None = None
    baseline_report: dict | None = None  # or inline
    optimized_report: dict | None = None
    out: str | None = None
    table: bool = False


class CompareResponse(BaseModel):
    report: dict
    table: str | None
    out_path: str | None


class AteRequest(BaseModel):
    traj: str
    gt: str
    align_scale: bool = False


class AteResponse(BaseModel):
    rmse_m: float
    poses: int


class PoseModel(BaseModel):
    q: list[float] = Field(min_length=4, max_length=4)  # x, y, z, w
    t: list[float] = Field(min_length=3, max_length=3)


class SessionCreateRequest(BaseModel):
    mode: str = "optimized"
    workers: int = 1
    queue_capacity: int = 3
    min_kf_interval_frames: int | None = 0  # streaming clients usually pre-filter
    num_levels: int = 8
    force_skip_lba: bool = False
    force_skip_culling: bool = False


class SessionCreateResponse(BaseModel):
    session_id: str


class KeyframePayload(BaseModel):
    kf_id: int
    frame_index: int
    pose: PoseModel
    kp_u: list[float]
    kp_v: list[float]
    kp_level: list[int]
    descriptors_hex: str
    fx: float = 460.0
    fy: float = 460.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    num_levels: int = 8
    scale_factor: float = 1.2


class EnqueueResponse(BaseModel):
    accepted: bool
    queue_depth: int


class ProcessRequest(BaseModel):
    max_keyframes: int = Field(default=0, ge=0)  # 0 = drain the queue


class ProcessResponse(BaseModel):
    processed: int
    timings: list[dict]
    live_keyframes: int
    live_points: int


class SessionReportResponse(BaseModel):
    report: dict


class TrajectoryResponse(BaseModel):
    rows: list[dict]
