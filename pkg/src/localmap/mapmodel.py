"""The mutable map: keyframes, map points, observations, per-scale
observation counters, and the covisibility graph.

Single-writer: one pipeline thread mutates the map; data-parallel stage
sections only read immutable snapshots between mutations. The per-scale
counter rows live in one shared int matrix so the culling fast path can
gather them without touching observation lists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .config import MapConfig
from .errors import InvalidArgumentError, InvalidStateError, SlotConflictError
from .geometry import DESCRIPTOR_BYTES, CameraIntrinsics, SE3Pose, hamming_cross

UNBOUND = -1


@dataclass
class KeyFrame:
    """One retained camera frame: pose, camera, pyramid keypoints, descriptors.

    Keypoint i's descriptor is descriptors[i]; mp_bindings[i] is the id of
    the map point observing through slot i, or -1.
    """

    kf_id: int
    pose: SE3Pose
    intrinsics: CameraIntrinsics
    kp_u: np.ndarray
    kp_v: np.ndarray
    kp_level: np.ndarray
    descriptors: np.ndarray
    frame_index: int = 0
    alive: bool = True
    mp_bindings: np.ndarray = None

    def __post_init__(self):
        self.kp_u = np.asarray(self.kp_u, dtype=np.float64)
        self.kp_v = np.asarray(self.kp_v, dtype=np.float64)
        self.kp_level = np.asarray(self.kp_level, dtype=np.int64)
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint8)
        n = len(self.kp_u)
        if not (len(self.kp_v) == len(self.kp_level) == n and self.descriptors.shape == (n, DESCRIPTOR_BYTES)):
            raise InvalidArgumentError("keypoint arrays and descriptors must have matching lengths")
        if n and (self.kp_level.min() < 0 or self.kp_level.max() >= self.intrinsics.num_levels):
            raise InvalidArgumentError("keypoint level outside pyramid")
        if self.mp_bindings is None:
            self.mp_bindings = np.full(n, UNBOUND, dtype=np.int64)
        else:
            self.mp_bindings = np.asarray(self.mp_bindings, dtype=np.int64)
            if self.mp_bindings.shape != (n,):
                raise InvalidArgumentError("mp_bindings length mismatch")

    @property
    def num_keypoints(self) -> int:
        return len(self.kp_u)


@dataclass
class MapPoint:
    """A 3D landmark with its observation map and lifecycle counters."""

    mp_id: int
    position: np.ndarray
    rep_descriptor: np.ndarray
    first_kf_id: int
    observations: dict[int, int] = field(default_factory=dict)  # kf_id -> keypoint index
    found_count: int = 1
    visible_count: int = 1
    alive: bool = True
    scale_counts: np.ndarray = None  # row view into MapModel's counter matrix


class CovisibilityGraph:
    """Symmetric weighted keyframe adjacency; weight = shared live map points."""

    def __init__(self):
        self._adj: dict[int, dict[int, int]] = {}

    def bump(self, a: int, b: int, delta: int):
        if a == b:
            return
        for u, v in ((a, b), (b, a)):
            row = self._adj.setdefault(u, {})
            w = row.get(v, 0) + delta
            if w <= 0:
                row.pop(v, None)
            else:
                row[v] = w

    def weight(self, a: int, b: int) -> int:
        return self._adj.get(a, {}).get(b, 0)

    def neighbors(self, kf_id: int, min_weight: int = 1) -> list[tuple[int, int]]:
        """(kf_id, weight) pairs sorted by weight desc, then id asc."""
        row = self._adj.get(kf_id, {})
        items = [(other, w) for other, w in row.items() if w >= min_weight]
        items.sort(key=lambda t: (-t[1], t[0]))
        return items

    def drop_keyframe(self, kf_id: int):
        row = self._adj.pop(kf_id, {})
        for other in row:
            self._adj.get(other, {}).pop(kf_id, None)


class MapModel:
    def __init__(self, num_levels: int, config: MapConfig | None = None):
        self.config = config or MapConfig()
        self.num_levels = num_levels
        self.keyframes: dict[int, KeyFrame] = {}
        self.points: dict[int, MapPoint] = {}
        self.graph = CovisibilityGraph()
        self._next_mp_id = 0
        self._counters = np.zeros((256, num_levels), dtype=np.int64)

    # --- internals --------------------------------------------------------

    def _grow_counters(self, mp_id: int):
        while mp_id >= len(self._counters):
            self._counters = np.vstack([self._counters, np.zeros_like(self._counters)])

    @property
    def counter_matrix(self) -> np.ndarray:
        """Per-point per-level observation counters, row-indexed by map point id."""
        return self._counters

    def _require_kf(self, kf_id: int) -> KeyFrame:
        kf = self.keyframes.get(kf_id)
        if kf is None:
            raise InvalidArgumentError(f"unknown keyframe {kf_id}")
        if not kf.alive:
            raise InvalidStateError(f"keyframe {kf_id} is dead")
        return kf

    def _require_mp(self, mp_id: int) -> MapPoint:
        mp = self.points.get(mp_id)
        if mp is None:
            raise InvalidArgumentError(f"unknown map point {mp_id}")
        if not mp.alive:
            raise InvalidStateError(f"map point {mp_id} is dead")
        return mp

    def _record_obs(self, mp: MapPoint, kf: KeyFrame, kp_index: int):
        for other in mp.observations:
            self.graph.bump(kf.kf_id, other, +1)
        mp.observations[kf.kf_id] = kp_index
        kf.mp_bindings[kp_index] = mp.mp_id
        self._counters[mp.mp_id, kf.kp_level[kp_index]] += 1

    def _unrecord_obs(self, mp: MapPoint, kf_id: int):
        kp_index = mp.observations.pop(kf_id)
        kf = self.keyframes[kf_id]
        kf.mp_bindings[kp_index] = UNBOUND
        self._counters[mp.mp_id, kf.kp_level[kp_index]] -= 1
        for other in mp.observations:
            self.graph.bump(kf_id, other, -1)

    def _refresh_rep_descriptor(self, mp: MapPoint):
        """Observing descriptor minimizing the median distance to the others.

        Ties break on (keyframe id, keypoint index) so the result is unique.
        """
        entries = sorted(mp.observations.items())
        if not entries:
            return
        descs = np.stack([self.keyframes[k].descriptors[i] for k, i in entries])
        if len(entries) == 1:
            mp.rep_descriptor = descs[0].copy()
            return
        dist = hamming_cross(descs, descs).astype(np.float64)
        np.fill_diagonal(dist, np.nan)
        medians = np.nanmedian(dist, axis=1)
        best = int(np.argmin(medians))  # first minimum = lowest (kf, kp) order
        mp.rep_descriptor = descs[best].copy()

    # --- operations ---------------------------------------------------------

    def insert_keyframe(self, kf: KeyFrame) -> int:
        if kf.kf_id in self.keyframes:
            raise InvalidArgumentError(f"duplicate keyframe id {kf.kf_id}")
        self.keyframes[kf.kf_id] = kf
        # register any pre-existing bindings as observations
        for kp_index in np.flatnonzero(kf.mp_bindings != UNBOUND):
            mp_id = int(kf.mp_bindings[kp_index])
            mp = self._require_mp(mp_id)
            if kf.kf_id in mp.observations:
                raise InvalidArgumentError(
                    f"keyframe {kf.kf_id} binds map point {mp_id} twice"
                )
            self._record_obs(mp, kf, int(kp_index))
            self._refresh_rep_descriptor(mp)
        return kf.kf_id

    def new_map_point(self, position, descriptor, first_kf_id: int) -> MapPoint:
        mp_id = self._next_mp_id
        self._next_mp_id += 1
        self._grow_counters(mp_id)
        mp = MapPoint(
            mp_id=mp_id,
            position=np.asarray(position, dtype=np.float64).copy(),
            rep_descriptor=np.asarray(descriptor, dtype=np.uint8).copy(),
            first_kf_id=first_kf_id,
        )
        mp.scale_counts = self._counters[mp_id]
        self.points[mp_id] = mp
        return mp

    def add_observation(self, mp_id: int, kf_id: int, kp_index: int):
        mp = self._require_mp(mp_id)
        kf = self._require_kf(kf_id)
        if not (0 <= kp_index < kf.num_keypoints):
            raise InvalidArgumentError(f"keypoint index {kp_index} out of range")
        if kf.mp_bindings[kp_index] != UNBOUND:
            raise SlotConflictError(
                f"slot ({kf_id}, {kp_index}) already bound to {int(kf.mp_bindings[kp_index])}"
            )
        if kf_id in mp.observations:
            raise SlotConflictError(f"map point {mp_id} already observes keyframe {kf_id}")
        self._record_obs(mp, kf, kp_index)
        self._refresh_rep_descriptor(mp)

    def erase_observation(self, mp_id: int, kf_id: int):
        mp = self._require_mp(mp_id)
        if kf_id not in mp.observations:
            raise InvalidArgumentError(f"map point {mp_id} does not observe keyframe {kf_id}")
        self._unrecord_obs(mp, kf_id)
        if len(mp.observations) < self.config.min_obs_keep:
            self.kill_map_point(mp_id)
        else:
            self._refresh_rep_descriptor(mp)

    def kill_map_point(self, mp_id: int):
        mp = self._require_mp(mp_id)
        for kf_id in sorted(mp.observations):
            self._unrecord_obs(mp, kf_id)
        mp.alive = False

    def replace_map_point(self, loser_id: int, winner_id: int) -> int:
        """Merge loser into winner; returns the number of migrated observations."""
        if loser_id == winner_id:
            raise InvalidArgumentError("cannot merge a map point with itself")
        loser = self._require_mp(loser_id)
        winner = self._require_mp(winner_id)
        if len(loser.observations) > len(winner.observations):
            raise InvalidArgumentError(
                "wrong merge direction: loser has more observations than winner"
            )
        migrated = 0
        for kf_id, kp_index in sorted(loser.observations.items()):
            self._unrecord_obs(loser, kf_id)
            if kf_id in winner.observations:
                continue  # winner already sees this keyframe; slot stays unbound
            kf = self.keyframes[kf_id]
            self._record_obs(winner, kf, kp_index)
            migrated += 1
        winner.found_count += loser.found_count
        winner.visible_count += loser.visible_count
        loser.alive = False
        self._refresh_rep_descriptor(winner)
        return migrated

    def covisible_neighbors(self, kf_id: int, n: int | None = None) -> list[int]:
        self._require_kf(kf_id)
        pairs = self.graph.neighbors(kf_id, self.config.min_covis_weight)
        ids = [k for k, _ in pairs if self.keyframes[k].alive]
        return ids if n is None else ids[:n]

    def kill_keyframe(self, kf_id: int):
        """Erase all its observations (possibly killing weak points), tombstone it."""
        kf = self._require_kf(kf_id)
        for mp_id in sorted(set(int(m) for m in kf.mp_bindings if m != UNBOUND)):
            mp = self.points[mp_id]
            if mp.alive and kf_id in mp.observations:
                self.erase_observation(mp_id, kf_id)
        kf.alive = False
        self.graph.drop_keyframe(kf_id)

    def live_keyframes(self) -> list[KeyFrame]:
        return [kf for kf in self.keyframes.values() if kf.alive]

    def live_points(self) -> list[MapPoint]:
        return [mp for mp in self.points.values() if mp.alive]

    def bound_points_of(self, kf_id: int) -> list[int]:
        """Live map point ids bound in this keyframe, in keypoint-index order."""
        kf = self.keyframes[kf_id]
        out = []
        for mp_id in kf.mp_bindings:
            if mp_id != UNBOUND:
                mp = self.points.get(int(mp_id))
                if mp is not None and mp.alive:
                    out.append(int(mp_id))
        return out

    # --- consistency audit --------------------------------------------------

    def audit(self) -> list[str]:
        """Brute-force recheck of counters, weights, and binding bijectivity."""
        violations: list[str] = []
        for mp in self.points.values():
            if not mp.alive:
                if mp.observations:
                    violations.append(f"dead map point {mp.mp_id} retains observations")
                continue
            expect = np.zeros(self.num_levels, dtype=np.int64)
            for kf_id, kp_index in mp.observations.items():
                kf = self.keyframes.get(kf_id)
                if kf is None or not kf.alive:
                    violations.append(f"map point {mp.mp_id} observes dead keyframe {kf_id}")
                    continue
                if kf.mp_bindings[kp_index] != mp.mp_id:
                    violations.append(
                        f"binding mismatch: map point {mp.mp_id} vs slot ({kf_id}, {kp_index})"
                    )
                expect[kf.kp_level[kp_index]] += 1
            if not np.array_equal(expect, self._counters[mp.mp_id]):
                violations.append(f"scale_counts mismatch for map point {mp.mp_id}")
            if int(self._counters[mp.mp_id].sum()) != len(mp.observations):
                violations.append(f"scale_counts sum mismatch for map point {mp.mp_id}")
        # slot side
        seen_slots: dict[tuple[int, int], int] = {}
        for kf in self.keyframes.values():
            if not kf.alive:
                continue
            for kp_index in np.flatnonzero(kf.mp_bindings != UNBOUND):
                mp_id = int(kf.mp_bindings[kp_index])
                mp = self.points.get(mp_id)
                if mp is None or not mp.alive:
                    violations.append(f"slot ({kf.kf_id}, {int(kp_index)}) bound to dead point {mp_id}")
                    continue
                if mp.observations.get(kf.kf_id) != int(kp_index):
                    violations.append(
                        f"slot ({kf.kf_id}, {int(kp_index)}) not in map point {mp_id} observations"
                    )
                seen_slots[(kf.kf_id, int(kp_index))] = mp_id
        # covisibility weights
        live = sorted(k for k, kf in self.keyframes.items() if kf.alive)
        bound: dict[int, set[int]] = {
            k: set(self.bound_points_of(k)) for k in live
        }
        for a, b in combinations(live, 2):
            expect_w = len(bound[a] & bound[b])
            got_w = self.graph.weight(a, b)
            if expect_w != got_w:
                violations.append(f"covisibility weight mismatch for pair ({a}, {b})")
        return violations
