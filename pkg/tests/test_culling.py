import numpy as np
import pytest

from localmap.config import CullConfig
from localmap.culling import (
    RecentPoint,
    cull_keyframes,
    cull_recent_map_points,
    is_redundant_baseline,
    is_redundant_fast,
)
from localmap.devicestore import DeviceStore
from localmap.geometry import SE3Pose
from localmap.mapmodel import KeyFrame, MapModel

from test_mapmodel import make_kf


def random_observation_map(cam, seed, n_kfs=8, n_points=60, max_obs=10, n_slots=None):
    """Random map with varied levels and observation counts 1..max_obs."""
    rng = np.random.default_rng(seed)
    n_slots = n_slots or (n_points + 8)
    m = MapModel(num_levels=cam.num_levels)
    for i in range(n_kfs):
        m.insert_keyframe(make_kf(cam, i, n=n_slots, seed=1000 + seed * 31 + i))
    for p in range(n_points):
        n_obs = int(rng.integers(1, max_obs + 1))
        kf_ids = rng.choice(n_kfs, size=min(n_obs, n_kfs), replace=False)
        mp = None
        for kf_id in kf_ids:
            kf = m.keyframes[int(kf_id)]
            free = np.flatnonzero(kf.mp_bindings == -1)
            if len(free) == 0:
                continue
            slot = int(free[0])
            if mp is None:
                mp = m.new_map_point(rng.normal(0, 5, 3), kf.descriptors[slot], int(kf_id))
            m.add_observation(mp.mp_id, int(kf_id), slot)
        if mp is not None and not mp.observations:
            m.points.pop(mp.mp_id)
    return m


class TestRecentCull:
    def _scene(self, cam):
        m = MapModel(num_levels=cam.num_levels)
        for i in range(4):
            m.insert_keyframe(make_kf(cam, i, n=16))
        return m

    def _point(self, m, obs):
        kfs = sorted(obs)
        mp = m.new_map_point([0, 0, 5.0], m.keyframes[kfs[0]].descriptors[0], kfs[0])
        for k in obs:
            free = int(np.flatnonzero(m.keyframes[k].mp_bindings == -1)[0])
            m.add_observation(mp.mp_id, k, free)
        return mp

    def test_low_found_ratio_removed(self, cam):
        m = self._scene(cam)
        mp = self._point(m, [0, 1])
        mp.found_count, mp.visible_count = 1, 10  # 0.1 < 0.25
        removed, keep = cull_recent_map_points(m, [RecentPoint(mp.mp_id, 0)], 1)
        assert removed == [mp.mp_id]
        assert not mp.alive and keep == []

    def test_graduation_after_probation(self, cam):
        m = self._scene(cam)
        mp = self._point(m, [0, 1, 2])
        removed, keep = cull_recent_map_points(m, [RecentPoint(mp.mp_id, 0)], 3)
        assert removed == [] and keep == []  # graduated, still alive
        assert mp.alive

    def test_under_observed_removed_after_probation(self, cam):
        m = self._scene(cam)
        mp = self._point(m, [0, 1])
        removed, keep = cull_recent_map_points(m, [RecentPoint(mp.mp_id, 0)], 3)
        assert removed == [mp.mp_id]

    def test_young_point_stays_in_probation(self, cam):
        m = self._scene(cam)
        mp = self._point(m, [0, 1])
        removed, keep = cull_recent_map_points(m, [RecentPoint(mp.mp_id, 5)], 6)
        assert removed == [] and len(keep) == 1

    def test_empty_list(self, cam):
        m = self._scene(cam)
        assert cull_recent_map_points(m, [], 10) == ([], [])


class TestRedundancyBaseline:
    def _build(self, cam, per_point_other_counts, level=2, other_level=None):
        """kf0 observes len(counts) points at `level`; point i is also seen by
        counts[i] other keyframes at other_level (default: same level)."""
        other_level = level if other_level is None else other_level
        m = MapModel(num_levels=cam.num_levels)
        n_slots = len(per_point_other_counts) + 4
        max_others = max(per_point_other_counts) if per_point_other_counts else 0

        def fixed_level_kf(kf_id, lv):
            rng = np.random.default_rng(kf_id + 77)
            return KeyFrame(
                kf_id=kf_id,
                pose=SE3Pose.identity(),
                intrinsics=cam,
                kp_u=rng.uniform(0, cam.width, n_slots),
                kp_v=rng.uniform(0, cam.height, n_slots),
                kp_level=np.full(n_slots, lv, dtype=np.int64),
                descriptors=rng.integers(0, 256, (n_slots, 32), dtype=np.uint8),
            )

        m.insert_keyframe(fixed_level_kf(0, level))
        for i in range(max_others):
            m.insert_keyframe(fixed_level_kf(1 + i, other_level))
        for i, cnt in enumerate(per_point_other_counts):
            mp = m.new_map_point([0, 0, 5.0], m.keyframes[0].descriptors[i], 0)
            m.add_observation(mp.mp_id, 0, i)
            for k in range(cnt):
                m.add_observation(mp.mp_id, 1 + k, i)
        return m

    def test_ninety_percent_exact(self, cam):
        m = self._build(cam, [3] * 9 + [0])
        red, rp, cp = is_redundant_baseline(m, 0)
        assert (red, rp, cp) == (True, 9, 10)

    def test_eighty_percent_not_redundant(self, cam):
        m = self._build(cam, [3] * 8 + [0, 0])
        red, rp, cp = is_redundant_baseline(m, 0)
        assert (red, rp, cp) == (False, 8, 10)

    def test_no_points_not_redundant(self, cam):
        m = MapModel(num_levels=cam.num_levels)
        m.insert_keyframe(make_kf(cam, 0))
        assert is_redundant_baseline(m, 0) == (False, 0, 0)

    def test_coarser_observers_do_not_count(self, cam):
        # others at coarser scale (higher level) than kf0's keypoints
        m = self._build(cam, [3] * 10, level=1, other_level=4)
        red, rp, cp = is_redundant_baseline(m, 0)
        assert (red, rp, cp) == (False, 0, 10)

    def test_finer_observers_count(self, cam):
        m = self._build(cam, [3] * 10, level=4, other_level=1)
        red, rp, cp = is_redundant_baseline(m, 0)
        assert (red, rp, cp) == (True, 10, 10)


class TestFastEquivalence:
    def test_prefix_sum_example(self, cam):
        # point with scale_counts=[2,2,0,...], this keyframe observing at level 1:
        # others at level <= 1 is (2+2) - 1 = 3 -> redundant
        m = TestRedundancyBaseline()._build(cam, [3], level=1, other_level=0)
        mp = next(iter(m.live_points()))
        # adjust: one own obs at level 1, three others at level 0
        assert list(m.counter_matrix[mp.mp_id][:2]) == [3, 1]
        red, rp, cp = is_redundant_fast(m, 0)
        assert (red, rp, cp) == (True, 1, 1)

    def test_single_observation_never_redundant(self, cam):
        m = TestRedundancyBaseline()._build(cam, [0])
        assert is_redundant_fast(m, 0) == (False, 0, 1)

    def test_equivalence_on_random_maps(self, cam):
        for seed in range(100):
            m = random_observation_map(cam, seed)
            for kf_id in list(m.keyframes):
                assert is_redundant_fast(m, kf_id) == is_redundant_baseline(m, kf_id), (
                    f"seed {seed}, kf {kf_id}"
                )

    def test_equivalence_with_scale_tolerance(self, cam):
        cfg = CullConfig(scale_tolerance_levels=1)
        for seed in range(30):
            m = random_observation_map(cam, seed + 500)
            for kf_id in list(m.keyframes):
                assert is_redundant_fast(m, kf_id, cfg) == is_redundant_baseline(m, kf_id, cfg)


class TestCullKeyframes:
    def test_no_redundancy_no_removal(self, cam):
        m = random_observation_map(cam, 3, n_kfs=5, n_points=30, max_obs=2)
        store = DeviceStore()
        for kf_id in m.keyframes:
            store.upload_keyframe(m.keyframes[kf_id])
        assert cull_keyframes(m, store, list(m.keyframes), impl="baseline") == []

    def test_dense_overlap_removes(self, cam):
        # every point seen by >= 5 keyframes at one level: middle keyframes redundant
        m = MapModel(num_levels=cam.num_levels)
        n_kf, n_pts = 6, 30
        for i in range(n_kf):
            m.insert_keyframe(make_kf(cam, i, n=n_pts, seed=40 + i))
            m.keyframes[i].kp_level[:] = 0
        for p in range(n_pts):
            mp = m.new_map_point([0, 0, 5.0], m.keyframes[0].descriptors[p], 0)
            for k in range(n_kf):
                m.add_observation(mp.mp_id, k, p)
        store = DeviceStore()
        for kf in m.keyframes.values():
            store.upload_keyframe(kf)
        removed = cull_keyframes(m, store, [1, 2, 3, 4], impl="baseline")
        assert len(removed) >= 1
        assert m.audit() == []
        for kf_id in removed:
            assert not m.keyframes[kf_id].alive
            assert not store.is_resident(kf_id)

    def test_sequential_semantics_removal_order(self, cam):
        # points seen by exactly 4 same-level keyframes: each point has 3 "others".
        # removing kf1 drops every point to 2 others, so kf2 must survive.
        m = MapModel(num_levels=cam.num_levels)
        n_pts = 20
        for i in range(4):
            m.insert_keyframe(make_kf(cam, i, n=n_pts, seed=60 + i))
            m.keyframes[i].kp_level[:] = 0
        for p in range(n_pts):
            mp = m.new_map_point([0, 0, 5.0], m.keyframes[0].descriptors[p], 0)
            for k in range(4):
                m.add_observation(mp.mp_id, k, p)
        store = DeviceStore()
        for kf in m.keyframes.values():
            store.upload_keyframe(kf)
        removed = cull_keyframes(m, store, [1, 2], impl="baseline")
        assert removed == [1]
        assert m.keyframes[2].alive
        assert m.audit() == []

    def test_keyframe_zero_protected(self, cam):
        m = TestRedundancyBaseline()._build(cam, [3] * 10)
        store = DeviceStore()
        for kf in m.keyframes.values():
            store.upload_keyframe(kf)
        assert 0 not in cull_keyframes(m, store, [0], impl="fast")
        assert m.keyframes[0].alive

    def test_both_impls_cull_identically(self, cam):
        for seed in range(20):
            removed = {}
            for impl in ("baseline", "fast"):
                m = random_observation_map(cam, 900 + seed, n_kfs=7, n_points=50, max_obs=7)
                store = DeviceStore()
                for kf in m.keyframes.values():
                    store.upload_keyframe(kf)
                removed[impl] = cull_keyframes(m, store, list(m.keyframes), impl=impl)
                assert m.audit() == []
            assert removed["baseline"] == removed["fast"]
