"""Deterministic synthetic worlds and keyframe sequences.

A sequence file is JSONL: one header line (config, camera, ground-truth
landmark table, duplicate pairs), then one line per keyframe. Ground truth
(true poses, per-keypoint landmark ids) lives in a separate `truth` section
per record so pipeline loaders cannot consume it by accident.

Duplicate injection instantiates a landmark twice: the two instances share
a position but their descriptor bases differ by twin_flip_bits, and even
keyframes observe instance A while odd ones observe instance B. With a
creation match threshold below twin_flip_bits and a fusion threshold above
it, the pipeline builds two map points and fusion must merge them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GenerationFailedError, InvalidArgumentError
from .geometry import (
    CameraIntrinsics,
    SE3Pose,
    exp_so3,
    flip_descriptor_bits,
    random_descriptors,
)
from .mapmodel import KeyFrame

SEQUENCE_FORMAT = 1

TRAJ_LINE = "line"
TRAJ_ORBIT = "orbit"
TRAJ_CORRIDOR = "corridor-loop"


@dataclass
class WorldConfig:
    seed: int = 0
    landmark_count: int = 400
    extent: float = 20.0
    trajectory: str = TRAJ_LINE
    keyframe_count: int = 30
    features_per_kf: int = 300
    pixel_noise_sigma: float = 0.0
    descriptor_flip_bits: int = 0
    spurious_feature_fraction: float = 0.0
    duplicate_injection_rate: float = 0.0
    twin_flip_bits: int = 45
    pose_noise_trans: float | None = None  # m; default 0.02 * pixel_noise_sigma
    pose_noise_rot_deg: float | None = None  # default 0.2 * pixel_noise_sigma
    frames_per_keyframe: int = 10
    min_covisible: int = 20
    retry_budget: int = 5
    width: int = 640
    height: int = 480
    fx: float = 460.0
    fy: float = 460.0
    cx: float = 320.0
    cy: float = 240.0
    num_levels: int = 8
    scale_factor: float = 1.2
    depth_near: float = 2.0
    depth_far: float = 40.0

    def __post_init__(self):
        if self.trajectory not in (TRAJ_LINE, TRAJ_ORBIT, TRAJ_CORRIDOR):
            raise InvalidArgumentError(f"unknown trajectory kind {self.trajectory!r}")
        if self.keyframe_count < 2 or self.landmark_count < 1:
            raise InvalidArgumentError("need at least 2 keyframes and 1 landmark")
        if self.pose_noise_trans is None:
            self.pose_noise_trans = 0.02 * self.pixel_noise_sigma
        if self.pose_noise_rot_deg is None:
            self.pose_noise_rot_deg = 0.2 * self.pixel_noise_sigma

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            width=self.width,
            height=self.height,
            num_levels=self.num_levels,
            scale_factor=self.scale_factor,
        )


@dataclass
class SequenceRecord:
    kf_id: int
    frame_index: int
    pose_gt: SE3Pose
    pose_init: SE3Pose
    kp_u: np.ndarray
    kp_v: np.ndarray
    kp_level: np.ndarray
    descriptors: np.ndarray
    landmark_ids: np.ndarray  # instance ids, -1 for spurious; oracle-only


@dataclass
class Sequence:
    config: WorldConfig
    landmarks: np.ndarray  # (n_instances, 3) true positions (instances included)
    canonical_ids: np.ndarray  # instance -> canonical landmark id
    duplicate_pairs: list[tuple[int, int]]
    records: list[SequenceRecord] = field(default_factory=list)

    def intrinsics(self) -> CameraIntrinsics:
        return self.config.intrinsics()

    def to_keyframes(self) -> list[KeyFrame]:
        """Pipeline-visible view of the sequence: initial poses, no truth."""
        cam = self.intrinsics()
        return [
            KeyFrame(
                kf_id=r.kf_id,
                pose=r.pose_init,
                intrinsics=cam,
                kp_u=r.kp_u.copy(),
                kp_v=r.kp_v.copy(),
                kp_level=r.kp_level.copy(),
                descriptors=r.descriptors.copy(),
                frame_index=r.frame_index,
            )
            for r in self.records
        ]

    def gt_positions(self) -> dict[int, np.ndarray]:
        return {r.kf_id: r.pose_gt.center() for r in self.records}


def _gt_poses(cfg: WorldConfig) -> list[SE3Pose]:
    k = cfg.keyframe_count
    poses = []
    if cfg.trajectory == TRAJ_LINE:
        xs = np.linspace(-cfg.extent / 2, cfg.extent / 2, k)
        for x in xs:
            poses.append(_looking_at(np.array([x, 0.0, 0.0]), np.array([x, 0.0, 10.0])))
    elif cfg.trajectory == TRAJ_ORBIT:
        radius = cfg.extent / 2
        for i in range(k):
            theta = 2 * np.pi * i / k
            c = np.array([radius * np.cos(theta), radius * np.sin(theta), 0.0])
            poses.append(_looking_at(c, np.zeros(3), up=np.array([0.0, 0.0, 1.0])))
    else:  # corridor-loop: rectangular circuit, camera aimed along the path
        length, widthw = cfg.extent, cfg.extent / 2
        corners = np.array(
            [[0.0, 0.0], [length, 0.0], [length, widthw], [0.0, widthw], [0.0, 0.0]]
        )
        seg_len = np.array([np.linalg.norm(corners[i + 1] - corners[i]) for i in range(4)])
        perimeter = float(seg_len.sum())

        def path_point(s):
            s = s % perimeter
            acc = 0.0
            for i in range(4):
                if s <= acc + seg_len[i] or i == 3:
                    t = (s - acc) / seg_len[i]
                    xy = corners[i] + t * (corners[i + 1] - corners[i])
                    return np.array([xy[0], xy[1], 0.0])
                acc += seg_len[i]

        lookahead = 5.0  # aim through corners so heading turns smoothly
        for s in np.linspace(0.0, perimeter, k, endpoint=False):
            c = path_point(s)
            target = path_point(s + lookahead)
            poses.append(_looking_at(c, target, up=np.array([0.0, 0.0, 1.0])))
    return poses


def _looking_at(center, target, up=np.array([0.0, -1.0, 0.0])) -> SE3Pose:
    fwd = np.asarray(target, dtype=np.float64) - center
    n = np.linalg.norm(fwd)
    fwd = fwd / n
    right = np.cross(up, fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.cross(np.array([1.0, 0.0, 0.0]), fwd)
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return SE3Pose.from_rotation_matrix(rot, -rot @ np.asarray(center, dtype=np.float64))


def _sample_landmarks(cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.landmark_count
    if cfg.trajectory == TRAJ_LINE:
        pts = np.column_stack(
            [
                rng.uniform(-cfg.extent / 2 - 4, cfg.extent / 2 + 4, n),
                rng.uniform(-4.0, 4.0, n),
                rng.uniform(4.0, 16.0, n),
            ]
        )
    elif cfg.trajectory == TRAJ_ORBIT:
        pts = rng.normal(0.0, cfg.extent / 8, (n, 3))
    else:
        length, widthw = cfg.extent, cfg.extent / 2
        side = rng.integers(0, 4, n)
        along = rng.uniform(0.0, 1.0, n)
        lateral = rng.uniform(1.5, 5.0, n) * rng.choice([-1.0, 1.0], n)
        height = rng.uniform(-2.5, 2.5, n)
        pts = np.zeros((n, 3))
        for i in range(n):
            if side[i] == 0:
                base = np.array([along[i] * length, 0.0])
                perp = np.array([0.0, 1.0])
            elif side[i] == 1:
                base = np.array([length, along[i] * widthw])
                perp = np.array([-1.0, 0.0])
            elif side[i] == 2:
                base = np.array([length * (1 - along[i]), widthw])
                perp = np.array([0.0, -1.0])
            else:
                base = np.array([0.0, widthw * (1 - along[i])])
                perp = np.array([1.0, 0.0])
            xy = base + perp * lateral[i]
            pts[i] = [xy[0], xy[1], height[i]]
    return pts


def _depth_levels(depth: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    base = (cfg.depth_far / cfg.depth_near) ** (1.0 / cfg.num_levels)
    safe = np.maximum(depth, cfg.depth_near * 1.0001)
    lvl = np.floor(np.log(safe / cfg.depth_near) / np.log(base)).astype(np.int64)
    return np.clip(lvl, 0, cfg.num_levels - 1)


def generate_sequence(cfg: WorldConfig) -> Sequence:
    """Deterministic world + observations; retries landmark placement until
    consecutive keyframes share at least min_covisible landmarks."""
    rng = np.random.default_rng(cfg.seed)
    cam = cfg.intrinsics()
    poses = _gt_poses(cfg)
    last_diag = ""
    for attempt in range(max(1, cfg.retry_budget)):
        base_pts = _sample_landmarks(cfg, rng)
        base_descs = random_descriptors(rng, cfg.landmark_count)
        # duplicate instances
        n_dup = int(round(cfg.duplicate_injection_rate * cfg.landmark_count))
        dup_sources = (
            rng.choice(cfg.landmark_count, size=n_dup, replace=False) if n_dup else np.zeros(0, int)
        )
        positions = [base_pts]
        descs = [base_descs]
        canonical = list(range(cfg.landmark_count))
        parity = np.zeros(cfg.landmark_count, dtype=np.int64)  # 0 = any keyframe
        pairs: list[tuple[int, int]] = []
        for src in sorted(int(s) for s in dup_sources):
            twin_id = len(canonical)
            positions.append(base_pts[src : src + 1])
            descs.append(
                flip_descriptor_bits(rng, base_descs[src], cfg.twin_flip_bits)[np.newaxis, :]
            )
            canonical.append(src)
            parity[src] = 1  # original: even keyframes only
            parity = np.append(parity, 2)  # twin: odd keyframes only
            pairs.append((src, twin_id))
        inst_pos = np.vstack(positions)
        inst_desc = np.vstack(descs)
        canonical_ids = np.array(canonical, dtype=np.int64)

        records, diag = _observe(cfg, cam, poses, inst_pos, inst_desc, parity, rng)
        if records is not None:
            return Sequence(cfg, inst_pos, canonical_ids, pairs, records)
        last_diag = diag
    raise GenerationFailedError(
        f"covisibility constraint unsatisfied after {cfg.retry_budget} attempts: {last_diag}"
    )


def _observe(cfg, cam, poses, inst_pos, inst_desc, parity, rng):
    records: list[SequenceRecord] = []
    prev_ids: set[int] = set()
    rot_sigma = np.deg2rad(cfg.pose_noise_rot_deg)
    for kf_id, pose in enumerate(poses):
        rot = pose.rotation_matrix()
        cammed = (rot @ inst_pos.T).T + pose.trans
        z = cammed[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cfg.fx * (cammed[:, 0] / z) + cfg.cx
            v = cfg.fy * (cammed[:, 1] / z) + cfg.cy
        vis = (
            (z > cfg.depth_near * 0.5)
            & (z < cfg.depth_far * 1.5)
            & (u >= 0)
            & (u < cfg.width)
            & (v >= 0)
            & (v < cfg.height)
        )
        if (parity == 1).any():
            want = 1 if kf_id % 2 == 0 else 2
            dup_mask = parity != 0
            vis &= ~dup_mask | (parity == want)
        cand = np.flatnonzero(vis)
        order = rng.permutation(len(cand))
        take = cand[order[: cfg.features_per_kf]]
        take = np.sort(take)  # stable keypoint order

        us, vs = u[take], v[take]
        if cfg.pixel_noise_sigma > 0:
            us = us + rng.normal(0, cfg.pixel_noise_sigma, len(take))
            vs = vs + rng.normal(0, cfg.pixel_noise_sigma, len(take))
            inside = (us >= 0) & (us < cfg.width) & (vs >= 0) & (vs < cfg.height)
            take, us, vs = take[inside], us[inside], vs[inside]
        levels = _depth_levels(z[take], cfg)
        if cfg.descriptor_flip_bits > 0:
            obs_desc = np.stack(
                [
                    flip_descriptor_bits(rng, inst_desc[i], cfg.descriptor_flip_bits)
                    for i in take
                ]
            ) if len(take) else np.zeros((0, 32), dtype=np.uint8)
        else:
            obs_desc = inst_desc[take].copy()
        ids = take.astype(np.int64)

        n_spur = int(round(cfg.spurious_feature_fraction * len(take)))
        if n_spur:
            su = rng.uniform(0, cfg.width, n_spur)
            sv = rng.uniform(0, cfg.height, n_spur)
            slv = rng.integers(0, cfg.num_levels, n_spur)
            sdesc = random_descriptors(rng, n_spur)
            us = np.concatenate([us, su])
            vs = np.concatenate([vs, sv])
            levels = np.concatenate([levels, slv])
            obs_desc = np.vstack([obs_desc, sdesc]) if len(obs_desc) else sdesc
            ids = np.concatenate([ids, np.full(n_spur, -1, dtype=np.int64)])

        cur_ids = set(int(i) for i in take)
        if kf_id > 0 and len(prev_ids & cur_ids) < cfg.min_covisible:
            return None, (
                f"keyframes {kf_id - 1}->{kf_id} share {len(prev_ids & cur_ids)}"
                f" < {cfg.min_covisible} landmarks"
            )
        prev_ids = cur_ids

        if kf_id >= 2 and (cfg.pose_noise_trans > 0 or rot_sigma > 0):
            drot = exp_so3(rng.normal(0, max(rot_sigma, 1e-12), 3))
            dt = rng.normal(0, max(cfg.pose_noise_trans, 1e-12), 3)
            pose_init = pose.compose(SE3Pose.from_rotation_matrix(drot, dt))
        else:
            pose_init = pose

        records.append(
            SequenceRecord(
                kf_id=kf_id,
                frame_index=kf_id * cfg.frames_per_keyframe,
                pose_gt=pose,
                pose_init=pose_init,
                kp_u=us,
                kp_v=vs,
                kp_level=levels,
                descriptors=obs_desc,
                landmark_ids=ids,
            )
        )
    return records, ""


# --- sequence file format -------------------------------------------------

def _pose_to_json(p: SE3Pose) -> dict:
    return {"q": [float(x) for x in p.quat], "t": [float(x) for x in p.trans]}


def _pose_from_json(d: dict) -> SE3Pose:
    return SE3Pose(np.array(d["q"], dtype=np.float64), np.array(d["t"], dtype=np.float64))


def write_sequence(seq: Sequence, path: str):
    with open(path, "w") as fh:
        header = {
            "type": "header",
            "format": SEQUENCE_FORMAT,
            "config": asdict(seq.config),
            "truth": {
                "landmarks": [[float(x) for x in row] for row in seq.landmarks],
                "canonical_ids": [int(x) for x in seq.canonical_ids],
                "duplicate_pairs": [[int(a), int(b)] for a, b in seq.duplicate_pairs],
            },
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in seq.records:
            line = {
                "type": "keyframe",
                "kf_id": r.kf_id,
                "frame_index": r.frame_index,
                "pose_init": _pose_to_json(r.pose_init),
                "kp_u": [float(x) for x in r.kp_u],
                "kp_v": [float(x) for x in r.kp_v],
                "kp_level": [int(x) for x in r.kp_level],
                "descriptors": r.descriptors.tobytes().hex(),
                "truth": {
                    "pose_gt": _pose_to_json(r.pose_gt),
                    "landmark_ids": [int(x) for x in r.landmark_ids],
                },
            }
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def read_sequence(path: str) -> Sequence:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("type") != "header" or header.get("format") != SEQUENCE_FORMAT:
            raise InvalidArgumentError(f"{path} is not a sequence file")
        cfg = WorldConfig(**header["config"])
        truth = header["truth"]
        records = []
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            desc = np.frombuffer(bytes.fromhex(d["descriptors"]), dtype=np.uint8)
            records.append(
                SequenceRecord(
                    kf_id=d["kf_id"],
                    frame_index=d["frame_index"],
                    pose_gt=_pose_from_json(d["truth"]["pose_gt"]),
                    pose_init=_pose_from_json(d["pose_init"]),
                    kp_u=np.array(d["kp_u"], dtype=np.float64),
                    kp_v=np.array(d["kp_v"], dtype=np.float64),
                    kp_level=np.array(d["kp_level"], dtype=np.int64),
                    descriptors=desc.reshape(-1, 32).copy(),
                    landmark_ids=np.array(d["truth"]["landmark_ids"], dtype=np.int64),
                )
            )
    return Sequence(
        cfg,
        np.array(truth["landmarks"], dtype=np.float64),
        np.array(truth["canonical_ids"], dtype=np.int64),
        [(int(a), int(b)) for a, b in truth["duplicate_pairs"]],
        records,
    )
