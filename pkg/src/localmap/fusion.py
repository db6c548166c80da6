"""Duplicate map-point detection and merging across covisibility neighbors.

Two-phase commit: actions are gathered against an immutable map snapshot
(data-parallel over point x target), then applied sequentially in gather
order, skipping anything that went stale earlier in the same batch. The
gather exists in a sequential reference engine and a chunked batch engine
with byte-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import FuseConfig
from .devicestore import DeviceStore
from .errors import SlotConflictError
from .geometry import hamming_pairs, hamming_to_many, project_pixels, rotate_rows
from .mapmodel import UNBOUND, KeyFrame, MapModel
from .parallel import SERIAL, WorkerPool, expand_ranges

_INF_DIST = np.int64(1 << 40)

MERGE = "merge"
ADD_OBSERVATION = "add-observation"


@dataclass(frozen=True)
class FuseAction:
    target_kf_id: int
    mp_id_projected: int
    kp_index_hit: int
    existing_mp_id: int | None
    kind: str


def collect_fusion_targets(model: MapModel, current_kf_id: int, n1: int, n2: int) -> list[int]:
    """First-order neighbors in weight order, then up to n2 not-yet-listed
    second-order neighbors per first-order one, in discovery order."""
    first = model.covisible_neighbors(current_kf_id, n1)
    targets = list(first)
    seen = set(first)
    seen.add(current_kf_id)
    for f in first:
        added = 0
        for s in model.covisible_neighbors(f):
            if added >= n2:
                break
            if s not in seen:
                targets.append(s)
                seen.add(s)
                added += 1
    return targets


def _point_geometry(model: MapModel, point_ids: list[int], cfg: FuseConfig, num_levels: int, scale: float):
    """Per-point view statistics shared by both engines: positions, descriptor,
    scale-band limits, level-0 reference distance, mean viewing direction."""
    n = len(point_ids)
    pos = np.zeros((n, 3))
    rep = np.zeros((n, 32), dtype=np.uint8)
    d0_min = np.zeros(n)
    d0_max = np.zeros(n)
    view = np.zeros((n, 3))
    alive = np.zeros(n, dtype=bool)
    for i, mp_id in enumerate(point_ids):
        mp = model.points.get(mp_id)
        if mp is None or not mp.alive or not mp.observations:
            continue
        alive[i] = True
        pos[i] = mp.position
        rep[i] = mp.rep_descriptor
        lo, hi = np.inf, -np.inf
        acc = np.zeros(3)
        for kf_id, kp_index in sorted(mp.observations.items()):
            kf = model.keyframes[kf_id]
            ray = mp.position - kf.pose.center()
            dist = float(np.sqrt(ray[0] ** 2 + ray[1] ** 2 + ray[2] ** 2))
            if dist <= 0:
                continue
            d0 = dist / scale ** int(kf.kp_level[kp_index])
            lo, hi = min(lo, d0), max(hi, d0)
            acc += ray / dist
        if not np.isfinite(lo):
            alive[i] = False
            continue
        norm = float(np.sqrt(acc[0] ** 2 + acc[1] ** 2 + acc[2] ** 2))
        view[i] = acc / norm if norm > 0 else acc
        d0_min[i] = lo
        d0_max[i] = hi
    band_lo = d0_min / cfg.dist_band_slack
    band_hi = d0_max * scale ** (num_levels - 1) * cfg.dist_band_slack
    return pos, rep, alive, band_lo, band_hi, d0_min, view


def _project_gates(model, point_ids, target: KeyFrame, cfg: FuseConfig):
    """Gates 1-5 for every point against one target, vectorized once and shared
    by both engines: returns (ok mask, u, v, predicted level, radius, rep)."""
    k = target.intrinsics
    num_levels, scale = k.num_levels, k.scale_factor
    pos, rep, alive, band_lo, band_hi, d0_min, view = _point_geometry(
        model, point_ids, cfg, num_levels, scale
    )
    rot = target.pose.rotation_matrix()
    t = target.pose.trans
    cx, cy, cz = target.pose.center()
    px, py, pz = pos[:, 0], pos[:, 1], pos[:, 2]
    qx, qy, qz = rotate_rows(rot, px, py, pz)
    zc = qz + t[2]
    u, v, inview = project_pixels(k, qx + t[0], qy + t[1], zc)
    dx, dy, dz = px - cx, py - cy, pz - cz
    d = np.sqrt(dx * dx + dy * dy + dz * dz)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos_view = (dx * view[:, 0] + dy * view[:, 1] + dz * view[:, 2]) / d
        lpred_raw = np.log(d / d0_min) / np.log(scale)
    lpred_raw = np.where(np.isfinite(lpred_raw), lpred_raw, 0.0)  # masked rows
    lpred = np.clip(np.rint(lpred_raw), 0, num_levels - 1).astype(np.int64)
    scale_table = np.array([scale ** l for l in range(num_levels)])
    radius = cfg.fuse_radius * scale_table[lpred]
    ok = (
        alive
        & (zc > 0)
        & inview
        & (d >= band_lo)
        & (d <= band_hi)
        & (cos_view >= cfg.min_view_cos)
    )
    return ok, u, v, lpred, radius, rep


def fuse_pass(
    model: MapModel,
    point_ids: list[int],
    target_kf_id: int,
    cfg: FuseConfig | None = None,
    *,
    engine: str = "reference",
    pool: WorkerPool | None = None,
) -> tuple[list[FuseAction], list[int]]:
    """Project each live point into the target keyframe and pick the best
    descriptor hit inside its scale-predicted search window.

    Returns (actions, visible_point_ids); per-point failures are absences.
    """
    cfg = cfg or FuseConfig()
    pool = pool or SERIAL
    target = model.keyframes[target_kf_id]
    if not point_ids:
        return [], []
    ok, u, v, lpred, radius, rep = _project_gates(model, point_ids, target, cfg)
    visible = [point_ids[i] for i in np.flatnonzero(ok)]

    if engine == "reference":
        picks = _fuse_reference(target, cfg, point_ids, ok, u, v, lpred, radius, rep)
    elif engine == "batch":
        picks = _fuse_batch(target, cfg, point_ids, ok, u, v, lpred, radius, rep, pool)
    else:
        raise ValueError(f"unknown fuse engine {engine!r}")

    actions: list[FuseAction] = []
    for i, j, dist in picks:
        mp_id = point_ids[i]
        bound = int(target.mp_bindings[j])
        if bound == UNBOUND:
            mp = model.points[mp_id]
            if target_kf_id in mp.observations:
                continue  # already observes this keyframe through another slot
            actions.append(FuseAction(target_kf_id, mp_id, j, None, ADD_OBSERVATION))
        elif bound != mp_id:
            other = model.points.get(bound)
            if other is not None and other.alive:
                actions.append(FuseAction(target_kf_id, mp_id, j, bound, MERGE))
        # bound to itself: nothing to do
    return actions, visible


def _fuse_reference(target, cfg, point_ids, ok, u, v, lpred, radius, rep):
    picks = []
    for i in np.flatnonzero(ok):
        du = target.kp_u - u[i]
        dv = target.kp_v - v[i]
        win = (du * du + dv * dv <= radius[i] * radius[i]) & (
            np.abs(target.kp_level - lpred[i]) <= cfg.level_window
        )
        idx = np.flatnonzero(win)
        if len(idx) == 0:
            continue
        dist = hamming_to_many(rep[i], target.descriptors[idx])
        good = dist <= cfg.match_max_distance
        if not good.any():
            continue
        masked = np.where(good, dist, _INF_DIST)
        k = int(np.argmin(masked))  # first minimum = lowest keypoint index
        picks.append((int(i), int(idx[k]), int(dist[k])))
    return picks


def _fuse_batch(target, cfg, point_ids, ok, u, v, lpred, radius, rep, pool):
    """Pair-grained kernel: candidate pairs from a u-sorted window around each
    projection, exact radius/level mask on survivors, descriptor distances
    last, (distance, index) key minimum per point."""
    n = len(point_ids)
    m = np.int64(target.num_keypoints)
    order = np.argsort(target.kp_u, kind="stable")  # once per pass
    su = target.kp_u[order]

    def run_chunk(start, stop):
        rows = np.arange(start, stop)
        rows = rows[ok[rows]]
        if len(rows) == 0:
            return []
        r = radius[rows]
        lo = np.searchsorted(su, u[rows] - r, side="left")
        hi = np.searchsorted(su, u[rows] + r, side="right")
        ri, flat = expand_ranges(lo, hi)
        if len(ri) == 0:
            return []
        ci = order[flat]
        du = target.kp_u[ci] - u[rows][ri]
        dv = target.kp_v[ci] - v[rows][ri]
        rr = r[ri]
        keep = (du * du + dv * dv <= rr * rr) & (
            np.abs(target.kp_level[ci] - lpred[rows][ri]) <= cfg.level_window
        )
        if not keep.any():
            return []
        ri, ci = ri[keep], ci[keep]
        dist = hamming_pairs(rep[rows[ri]], target.descriptors[ci])
        keep = dist <= cfg.match_max_distance
        if not keep.any():
            return []
        ri, ci, dist = ri[keep], ci[keep], dist[keep]
        key = dist * m + ci
        best = np.full(len(rows), _INF_DIST, dtype=np.int64)
        np.minimum.at(best, ri, key)
        out = []
        for local_row in np.flatnonzero(best < _INF_DIST):
            k = best[local_row]
            out.append((int(rows[local_row]), int(k % m), int(k // m)))
        return out

    picks: list[tuple[int, int, int]] = []
    for chunk in pool.map_chunks(run_chunk, n, cfg.chunk_size):
        picks.extend(chunk)
    return picks


def apply_fusion(model: MapModel, actions: list[FuseAction]) -> dict[str, int]:
    """Apply gathered actions in list order; stale ones are skipped and counted."""
    counts = {"merged": 0, "observations_added": 0, "stale": 0}
    for action in actions:
        mp = model.points.get(action.mp_id_projected)
        target = model.keyframes.get(action.target_kf_id)
        if mp is None or not mp.alive or target is None or not target.alive:
            counts["stale"] += 1
            continue
        if action.kind == MERGE:
            other = model.points.get(action.existing_mp_id)
            if (
                other is None
                or not other.alive
                or other.mp_id == mp.mp_id
                or int(target.mp_bindings[action.kp_index_hit]) != other.mp_id
            ):
                counts["stale"] += 1
                continue
            _merge(model, mp, other)
            counts["merged"] += 1
        else:
            bound_now = int(target.mp_bindings[action.kp_index_hit])
            if bound_now != UNBOUND:
                # slot claimed earlier in this batch: the claimants matched the
                # same feature, so they are duplicates - merge immediately
                other = model.points.get(bound_now)
                if other is None or not other.alive or other.mp_id == mp.mp_id:
                    counts["stale"] += 1
                    continue
                _merge(model, mp, other)
                counts["merged"] += 1
                continue
            if action.target_kf_id in mp.observations:
                counts["stale"] += 1
                continue
            try:
                model.add_observation(mp.mp_id, action.target_kf_id, action.kp_index_hit)
            except SlotConflictError:
                counts["stale"] += 1
                continue
            mp.found_count += 1
            counts["observations_added"] += 1
    return counts


def _merge(model: MapModel, a, b):
    """Merge two live points: more observations wins, ties lose the higher id."""
    if len(a.observations) == len(b.observations):
        loser, winner = (a, b) if a.mp_id > b.mp_id else (b, a)
    elif len(a.observations) < len(b.observations):
        loser, winner = a, b
    else:
        loser, winner = b, a
    model.replace_map_point(loser.mp_id, winner.mp_id)
    winner.found_count += 1


def run_fusion(
    model: MapModel,
    store: DeviceStore,
    current_kf_id: int,
    cfg: FuseConfig | None = None,
    *,
    engine: str = "reference",
    pool: WorkerPool | None = None,
) -> dict[str, int]:
    """Forward pass (current keyframe's points into every target), then reverse
    (each target's points into the current keyframe). Deterministic."""
    cfg = cfg or FuseConfig()
    targets = collect_fusion_targets(model, current_kf_id, cfg.n1, cfg.n2)
    totals = {"merged": 0, "observations_added": 0, "stale": 0}
    if not targets:
        return totals
    store.record_neighbor_access("fusion", targets)
    record_bytes = store.config.map_point_record_bytes

    fwd_points = model.bound_points_of(current_kf_id)
    store.record_small_transfer("fusion", len(fwd_points) * record_bytes)
    gathered: list[FuseAction] = []
    for t in targets:
        actions, visible = fuse_pass(model, fwd_points, t, cfg, engine=engine, pool=pool)
        gathered.extend(actions)
        for mp_id in visible:
            model.points[mp_id].visible_count += 1
    for key, val in apply_fusion(model, gathered).items():
        totals[key] += val

    for t in targets:
        rev_points = model.bound_points_of(t)
        store.record_small_transfer("fusion", len(rev_points) * record_bytes)
        actions, visible = fuse_pass(model, rev_points, current_kf_id, cfg, engine=engine, pool=pool)
        for mp_id in visible:
            mp = model.points.get(mp_id)
            if mp is not None and mp.alive:
                mp.visible_count += 1
        for key, val in apply_fusion(model, actions).items():
            totals[key] += val
    return totals
