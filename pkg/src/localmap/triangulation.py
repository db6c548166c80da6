"""Search-for-triangulation and map-point creation.

The search ships in two interchangeable engines with byte-identical output:

* ``reference`` - one Python loop per current keypoint, the sequential
  implementation the baseline pipeline runs and the oracle the optimized
  path is tested against.
* ``batch`` - fixed-size keypoint chunks pushed through vectorized
  distance / epipolar kernels on the worker pool, the artifact's stand-in
  for a one-thread-per-feature device kernel.

Matching is a pure function of a bindings snapshot taken at stage start;
map mutation happens afterwards on the pipeline thread, so candidates that
lost a slot race are skipped as conflicts rather than corrupting the map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import GateConfig, MatchConfig
from .devicestore import DeviceStore
from .errors import DegenerateGeometryError, SlotConflictError
from .geometry import (
    check_creation_gates,
    epipolar_line,
    epipolar_sqdist,
    fundamental_matrix,
    hamming_pairs,
    hamming_to_many,
    triangulate,
)
from .mapmodel import UNBOUND, KeyFrame, MapModel
from .parallel import SERIAL, WorkerPool, expand_ranges

_INF_DIST = np.int64(1 << 40)


@dataclass(frozen=True)
class MatchCandidate:
    neighbor_kf_id: int
    kp_index_current: int
    kp_index_neighbor: int
    distance: int


@dataclass
class CreationStats:
    """Per-stage outcome counters; failures are values, not errors."""

    created: int = 0
    conflicts: int = 0
    degenerate: int = 0
    gate_failures: dict[str, int] = field(default_factory=dict)
    degenerate_neighbors: list[int] = field(default_factory=list)

    def count_gate(self, reason: str):
        self.gate_failures[reason] = self.gate_failures.get(reason, 0) + 1


def _one_to_one(
    picks: list[tuple[int, int, int]], neighbor_kf_id: int
) -> list[MatchCandidate]:
    """Resolve neighbor-keypoint collisions: keep lowest (distance, current index)."""
    best_for_j: dict[int, tuple[int, int]] = {}
    for i, j, dist in picks:
        cur = best_for_j.get(j)
        if cur is None or (dist, i) < cur:
            best_for_j[j] = (dist, i)
    out = [
        MatchCandidate(neighbor_kf_id, i, j, dist)
        for j, (dist, i) in best_for_j.items()
    ]
    out.sort(key=lambda c: c.kp_index_current)
    return out


def search_for_triangulation(
    current: KeyFrame,
    neighbor: KeyFrame,
    cfg: MatchConfig | None = None,
    *,
    engine: str = "reference",
    pool: WorkerPool | None = None,
    unbound_current: np.ndarray | None = None,
    unbound_neighbor: np.ndarray | None = None,
) -> list[MatchCandidate]:
    """Best epipolar-consistent descriptor match in `neighbor` for each unbound
    current keypoint; one-to-one, sorted by current keypoint index.

    A near-zero baseline skips the pair (returns no candidates), mirroring
    low-parallax neighbor rejection.
    """
    cfg = cfg or MatchConfig()
    pool = pool or SERIAL
    if unbound_current is None:
        unbound_current = current.mp_bindings == UNBOUND
    if unbound_neighbor is None:
        unbound_neighbor = neighbor.mp_bindings == UNBOUND
    try:
        f = fundamental_matrix(current.pose, neighbor.pose, current.intrinsics, neighbor.intrinsics)
    except DegenerateGeometryError:
        return []
    sigma2 = neighbor.intrinsics.sigma2_table()
    epi_thresh = cfg.chi2_epi * sigma2[neighbor.kp_level]  # per neighbor keypoint
    if engine == "reference":
        picks = _search_reference(current, neighbor, cfg, f, epi_thresh, unbound_current, unbound_neighbor)
    elif engine == "batch":
        picks = _search_batch(current, neighbor, cfg, f, epi_thresh, unbound_current, unbound_neighbor, pool)
    else:
        raise ValueError(f"unknown search engine {engine!r}")
    return _one_to_one(picks, neighbor.kf_id)


def _search_reference(current, neighbor, cfg, f, epi_thresh, unbound_current, unbound_neighbor):
    picks = []
    nbr_levels = neighbor.kp_level
    for i in range(current.num_keypoints):
        if not unbound_current[i]:
            continue
        level_ok = np.abs(nbr_levels - current.kp_level[i]) <= cfg.level_window
        eligible = unbound_neighbor & level_ok
        if not eligible.any():
            continue
        dist = hamming_to_many(current.descriptors[i], neighbor.descriptors)
        l0, l1, l2 = epipolar_line(f, current.kp_u[i], current.kp_v[i])
        epi = epipolar_sqdist(l0, l1, l2, neighbor.kp_u, neighbor.kp_v)
        good = eligible & (dist <= cfg.match_max_distance) & (epi <= epi_thresh)
        if not good.any():
            continue
        masked = np.where(good, dist, _INF_DIST)
        j = int(np.argmin(masked))  # first minimum = lowest index
        picks.append((i, j, int(dist[j])))
    return picks


def _search_batch(current, neighbor, cfg, f, epi_thresh, unbound_current, unbound_neighbor, pool):
    """Pair-grained kernel: candidate pairs come from level buckets of the
    neighbor's unbound keypoints (contiguous in a level-sorted order), the
    epipolar then descriptor gates run on survivors only, and a
    (distance, index)-encoded minimum reproduces the reference tie rule."""
    n = current.num_keypoints
    m = np.int64(neighbor.num_keypoints)
    num_levels = neighbor.intrinsics.num_levels

    # level-sorted view of the neighbor's unbound keypoints (built once)
    cand = np.flatnonzero(unbound_neighbor)
    order = cand[np.argsort(neighbor.kp_level[cand], kind="stable")]
    lvl_sorted = neighbor.kp_level[order]
    bucket_lo = np.searchsorted(lvl_sorted, np.arange(num_levels), side="left")
    bucket_hi = np.searchsorted(lvl_sorted, np.arange(num_levels), side="right")

    def run_chunk(start, stop):
        rows = np.arange(start, stop)
        rows = rows[unbound_current[rows]]
        if len(rows) == 0:
            return []
        lvl = current.kp_level[rows]
        lo = bucket_lo[np.maximum(lvl - cfg.level_window, 0)]
        hi = bucket_hi[np.minimum(lvl + cfg.level_window, num_levels - 1)]
        ri, flat = expand_ranges(lo, hi)
        if len(ri) == 0:
            return []
        ci = order[flat]
        gi = rows[ri]
        l0, l1, l2 = epipolar_line(f, current.kp_u[gi], current.kp_v[gi])
        epi = epipolar_sqdist(l0, l1, l2, neighbor.kp_u[ci], neighbor.kp_v[ci])
        keep = epi <= epi_thresh[ci]
        if not keep.any():
            return []
        ri, ci, gi = ri[keep], ci[keep], gi[keep]
        dist = hamming_pairs(current.descriptors[gi], neighbor.descriptors[ci])
        keep = dist <= cfg.match_max_distance
        if not keep.any():
            return []
        ri, ci, dist = ri[keep], ci[keep], dist[keep]
        # lexicographic (distance, neighbor index) minimum per current keypoint
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


def create_map_points(
    model: MapModel,
    store: DeviceStore,
    current_kf_id: int,
    neighbor_count: int,
    match_cfg: MatchConfig | None = None,
    gate_cfg: GateConfig | None = None,
    *,
    engine: str = "reference",
    pool: WorkerPool | None = None,
    stats: CreationStats | None = None,
) -> list[int]:
    """Triangulate new map points against the top covisible neighbors.

    Neighbor selection pads with the most recent live keyframes when the
    covisibility graph is still too sparse (there is no tracking module to
    seed bindings). Candidate application is sequential and deterministic;
    conflicts and gate failures are counted, never raised.
    """
    match_cfg = match_cfg or MatchConfig()
    gate_cfg = gate_cfg or GateConfig()
    stats = stats if stats is not None else CreationStats()
    current = model.keyframes[current_kf_id]

    neighbors = model.covisible_neighbors(current_kf_id, neighbor_count)
    if len(neighbors) < neighbor_count:
        recent = sorted(
            (k for k, kf in model.keyframes.items() if kf.alive and k != current_kf_id),
            reverse=True,
        )
        for k in recent:
            if len(neighbors) >= neighbor_count:
                break
            if k not in neighbors:
                neighbors.append(k)
    if not neighbors:
        return []
    store.record_neighbor_access("triangulation", neighbors)

    # bindings snapshot: the parallel search grain is (keypoint x neighbor)
    unbound_current = current.mp_bindings == UNBOUND
    snapshots = {k: model.keyframes[k].mp_bindings == UNBOUND for k in neighbors}

    candidates: list[MatchCandidate] = []
    for k in neighbors:
        neighbor = model.keyframes[k]
        found = search_for_triangulation(
            current,
            neighbor,
            match_cfg,
            engine=engine,
            pool=pool,
            unbound_current=unbound_current,
            unbound_neighbor=snapshots[k],
        )
        if not found:
            try:
                fundamental_matrix(current.pose, neighbor.pose, current.intrinsics, neighbor.intrinsics)
            except DegenerateGeometryError:
                stats.degenerate_neighbors.append(k)
        candidates.extend(found)

    created: list[int] = []
    for cand in candidates:
        neighbor = model.keyframes[cand.neighbor_kf_id]
        if (
            current.mp_bindings[cand.kp_index_current] != UNBOUND
            or neighbor.mp_bindings[cand.kp_index_neighbor] != UNBOUND
        ):
            stats.conflicts += 1
            continue
        pix_a = (current.kp_u[cand.kp_index_current], current.kp_v[cand.kp_index_current])
        pix_b = (neighbor.kp_u[cand.kp_index_neighbor], neighbor.kp_v[cand.kp_index_neighbor])
        try:
            point = triangulate(
                current.pose, neighbor.pose, current.intrinsics, neighbor.intrinsics, pix_a, pix_b
            )
        except DegenerateGeometryError:
            stats.degenerate += 1
            continue
        gate = check_creation_gates(
            current.pose,
            neighbor.pose,
            current.intrinsics,
            neighbor.intrinsics,
            pix_a,
            pix_b,
            int(current.kp_level[cand.kp_index_current]),
            int(neighbor.kp_level[cand.kp_index_neighbor]),
            point,
            gate_cfg,
        )
        if not gate.passed:
            stats.count_gate(gate.reason)
            continue
        mp = model.new_map_point(point, current.descriptors[cand.kp_index_current], current_kf_id)
        try:
            model.add_observation(mp.mp_id, current_kf_id, cand.kp_index_current)
            model.add_observation(mp.mp_id, cand.neighbor_kf_id, cand.kp_index_neighbor)
        except SlotConflictError:
            model.kill_map_point(mp.mp_id)
            stats.conflicts += 1
            continue
        created.append(mp.mp_id)
        stats.created += 1
    return created
