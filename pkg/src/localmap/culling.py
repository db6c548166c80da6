"""Recent map-point culling and redundant-keyframe culling.

Keyframe redundancy ships in two provably equivalent forms: the baseline
scan walks every bound point's observation list; the fast path reads the
per-scale counter matrix maintained by the map (one prefix sum per point
instead of an observation-list walk). Both answer: is at least 90% of what
this keyframe sees also seen by >= 3 other keyframes at the same or finer
scale?
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CullConfig
from .devicestore import DeviceStore
from .mapmodel import UNBOUND, MapModel


@dataclass
class RecentPoint:
    mp_id: int
    created_at: int  # processed-keyframe counter at creation time


def cull_recent_map_points(
    model: MapModel,
    recent: list[RecentPoint],
    current_index: int,
    cfg: CullConfig | None = None,
) -> tuple[list[int], list[RecentPoint]]:
    """Drop weak new points; graduate survivors out of probation.

    Removal rules: found/visible ratio below the floor at any age, or fewer
    than the graduation observation count once probation has elapsed.
    Returns (removed ids, points still under probation).
    """
    cfg = cfg or CullConfig()
    removed: list[int] = []
    keep: list[RecentPoint] = []
    for entry in recent:
        mp = model.points.get(entry.mp_id)
        if mp is None or not mp.alive:
            continue
        age = current_index - entry.created_at
        ratio = mp.found_count / max(mp.visible_count, 1)
        if ratio < cfg.found_ratio_min:
            model.kill_map_point(mp.mp_id)
            removed.append(mp.mp_id)
        elif age >= cfg.probation_kfs:
            if len(mp.observations) < cfg.min_obs_graduate:
                model.kill_map_point(mp.mp_id)
                removed.append(mp.mp_id)
            # else: graduated, leaves probation
        else:
            keep.append(entry)
    return removed, keep


def is_redundant_baseline(
    model: MapModel, kf_id: int, cfg: CullConfig | None = None
) -> tuple[bool, int, int]:
    """Observation-list scan: for each bound live point, walk its observation
    map counting other keyframes observing at the same or finer scale."""
    cfg = cfg or CullConfig()
    kf = model.keyframes[kf_id]
    tol = cfg.scale_tolerance_levels
    redundant_points = 0
    considered = 0
    for kp_index, mp_id in enumerate(kf.mp_bindings):
        if mp_id == UNBOUND:
            continue
        mp = model.points.get(int(mp_id))
        if mp is None or not mp.alive:
            continue
        considered += 1
        level_limit = int(kf.kp_level[kp_index]) + tol
        others = 0
        for other_kf_id, other_kp in mp.observations.items():
            if other_kf_id == kf_id:
                continue
            other = model.keyframes[other_kf_id]
            if int(other.kp_level[other_kp]) <= level_limit:
                others += 1
                if others >= cfg.min_redundant_observers:
                    break
        if others >= cfg.min_redundant_observers:
            redundant_points += 1
    redundant = considered > 0 and redundant_points >= cfg.redundancy_ratio * considered
    return redundant, redundant_points, considered


def is_redundant_fast(
    model: MapModel, kf_id: int, cfg: CullConfig | None = None
) -> tuple[bool, int, int]:
    """Counter-array path: per point, a prefix sum over its per-scale counters
    replaces the observation-list walk. Identical output to the baseline."""
    cfg = cfg or CullConfig()
    kf = model.keyframes[kf_id]
    bound = np.flatnonzero(kf.mp_bindings != UNBOUND)
    if len(bound) == 0:
        return False, 0, 0
    ids = kf.mp_bindings[bound]
    alive = np.array([model.points[int(m)].alive for m in ids], dtype=bool)
    bound = bound[alive]
    ids = ids[alive]
    considered = len(bound)
    if considered == 0:
        return False, 0, 0
    counters = model.counter_matrix[ids]  # (n, num_levels)
    limits = np.minimum(
        kf.kp_level[bound] + cfg.scale_tolerance_levels, model.num_levels - 1
    )
    prefix = np.cumsum(counters, axis=1)
    # own observation always falls inside the prefix window; subtract it
    others = prefix[np.arange(considered), limits] - 1
    redundant_points = int((others >= cfg.min_redundant_observers).sum())
    redundant = redundant_points >= cfg.redundancy_ratio * considered
    return redundant, redundant_points, considered


_REDUNDANCY_IMPLS = {
    "baseline": is_redundant_baseline,
    "fast": is_redundant_fast,
}


def cull_keyframes(
    model: MapModel,
    store: DeviceStore,
    candidate_ids: list[int],
    impl: str = "baseline",
    cfg: CullConfig | None = None,
) -> list[int]:
    """Evaluate candidates in id order with the configured redundancy check;
    removal is immediate, so later candidates see the post-removal map."""
    cfg = cfg or CullConfig()
    check = _REDUNDANCY_IMPLS[impl]
    removed: list[int] = []
    for kf_id in sorted(set(candidate_ids)):
        if kf_id == 0:
            continue  # map origin anchor
        kf = model.keyframes.get(kf_id)
        if kf is None or not kf.alive:
            continue
        redundant, _, _ = check(model, kf_id, cfg)
        if redundant:
            model.kill_keyframe(kf_id)
            if store.is_resident(kf_id):
                store.evict_keyframe(kf_id)
            removed.append(kf_id)
    return removed
