import numpy as np
import pytest

from localmap.errors import InvalidArgumentError, InvalidStateError, SlotConflictError
from localmap.geometry import SE3Pose, hamming
from localmap.mapmodel import KeyFrame, MapModel, UNBOUND


def make_kf(cam, kf_id, n=32, seed=None, pose=None):
    rng = np.random.default_rng(seed if seed is not None else kf_id)
    return KeyFrame(
        kf_id=kf_id,
        pose=pose or SE3Pose.identity(),
        intrinsics=cam,
        kp_u=rng.uniform(0, cam.width, n),
        kp_v=rng.uniform(0, cam.height, n),
        kp_level=rng.integers(0, cam.num_levels, n),
        descriptors=rng.integers(0, 256, (n, 32), dtype=np.uint8),
    )


@pytest.fixture
def world(cam):
    m = MapModel(num_levels=cam.num_levels)
    kfs = [make_kf(cam, i, n=64) for i in range(4)]
    for kf in kfs:
        m.insert_keyframe(kf)
    return m, kfs


class TestInsert:
    def test_empty_map_insert(self, cam):
        m = MapModel(num_levels=cam.num_levels)
        m.insert_keyframe(make_kf(cam, 0))
        assert len(m.live_keyframes()) == 1
        assert m.graph.neighbors(0) == []

    def test_duplicate_id_rejected(self, cam):
        m = MapModel(num_levels=cam.num_levels)
        m.insert_keyframe(make_kf(cam, 0))
        with pytest.raises(InvalidArgumentError):
            m.insert_keyframe(make_kf(cam, 0))

    def test_prebound_keyframe_creates_edges(self, cam):
        m = MapModel(num_levels=cam.num_levels)
        kf0 = make_kf(cam, 0, n=16)
        m.insert_keyframe(kf0)
        mps = []
        for i in range(12):
            mp = m.new_map_point(np.zeros(3), kf0.descriptors[i], 0)
            m.add_observation(mp.mp_id, 0, i)
            mps.append(mp.mp_id)
        kf1 = make_kf(cam, 1, n=16)
        kf1.mp_bindings[:12] = mps
        m.insert_keyframe(kf1)
        assert m.graph.weight(0, 1) == 12
        assert m.audit() == []


class TestObservations:
    def test_single_increment(self, world, cam):
        m, kfs = world
        idx = int(np.flatnonzero(kfs[0].kp_level == 2)[0])
        mp = m.new_map_point([0, 0, 5.0], kfs[0].descriptors[idx], 0)
        m.add_observation(mp.mp_id, 0, idx)
        expect = np.zeros(cam.num_levels, dtype=np.int64)
        expect[2] = 1
        assert np.array_equal(mp.scale_counts, expect)

    def test_second_observation_counts(self, world, cam):
        m, kfs = world
        i0 = int(np.flatnonzero(kfs[0].kp_level == 2)[0])
        i1 = int(np.flatnonzero(kfs[1].kp_level == 0)[0])
        mp = m.new_map_point([0, 0, 5.0], kfs[0].descriptors[i0], 0)
        m.add_observation(mp.mp_id, 0, i0)
        m.add_observation(mp.mp_id, 1, i1)
        assert mp.scale_counts[0] == 1 and mp.scale_counts[2] == 1
        assert int(mp.scale_counts.sum()) == len(mp.observations) == 2
        assert m.graph.weight(0, 1) == 1
        assert m.audit() == []

    def test_rebind_conflicts(self, world):
        m, kfs = world
        mp1 = m.new_map_point([0, 0, 5.0], kfs[0].descriptors[0], 0)
        mp2 = m.new_map_point([1, 0, 5.0], kfs[0].descriptors[1], 0)
        m.add_observation(mp1.mp_id, 0, 0)
        with pytest.raises(SlotConflictError):
            m.add_observation(mp2.mp_id, 0, 0)

    def test_dead_entities_rejected(self, world):
        m, kfs = world
        mp = m.new_map_point([0, 0, 5.0], kfs[0].descriptors[0], 0)
        m.add_observation(mp.mp_id, 0, 0)
        m.kill_map_point(mp.mp_id)
        with pytest.raises(InvalidStateError):
            m.add_observation(mp.mp_id, 1, 0)

    def test_erase_keeps_consistency(self, world):
        m, kfs = world
        mp = m.new_map_point([0, 0, 5.0], kfs[0].descriptors[0], 0)
        for k in range(3):
            m.add_observation(mp.mp_id, k, 0)
        m.erase_observation(mp.mp_id, 1)
        assert mp.alive and len(mp.observations) == 2
        assert int(mp.scale_counts.sum()) == 2
        assert m.audit() == []

    def test_erase_below_floor_kills(self, world):
        m, kfs = world
        mp = m.new_map_point([0, 0, 5.0], kfs[0].descriptors[0], 0)
        m.add_observation(mp.mp_id, 0, 0)
        m.add_observation(mp.mp_id, 1, 0)
        m.erase_observation(mp.mp_id, 0)
        assert not mp.alive
        assert kfs[0].mp_bindings[0] == UNBOUND and kfs[1].mp_bindings[0] == UNBOUND
        assert m.audit() == []

    def test_erase_missing_rejected(self, world):
        m, kfs = world
        mp = m.new_map_point([0, 0, 5.0], kfs[0].descriptors[0], 0)
        m.add_observation(mp.mp_id, 0, 0)
        with pytest.raises(InvalidArgumentError):
            m.erase_observation(mp.mp_id, 3)


class TestReplace:
    def _mk(self, m, kfs, obs):
        mp = m.new_map_point([0, 0, 5.0], kfs[obs[0][0]].descriptors[obs[0][1]], obs[0][0])
        for kf_id, idx in obs:
            m.add_observation(mp.mp_id, kf_id, idx)
        return mp

    def test_disjoint_union(self, world):
        m, kfs = world
        loser = self._mk(m, kfs, [(0, 0)])
        winner = self._mk(m, kfs, [(1, 1), (2, 1)])
        m.replace_map_point(loser.mp_id, winner.mp_id)
        assert not loser.alive
        assert len(winner.observations) == 3
        assert m.audit() == []

    def test_overlap_slot_erased(self, world):
        m, kfs = world
        loser = self._mk(m, kfs, [(1, 0)])
        winner = self._mk(m, kfs, [(1, 1), (2, 1)])
        m.replace_map_point(loser.mp_id, winner.mp_id)
        assert len(winner.observations) == 2
        assert kfs[1].mp_bindings[0] == UNBOUND
        assert m.audit() == []

    def test_wrong_direction_rejected(self, world):
        m, kfs = world
        big = self._mk(m, kfs, [(0, 0), (1, 0), (2, 0)])
        small = self._mk(m, kfs, [(3, 0)])
        with pytest.raises(InvalidArgumentError):
            m.replace_map_point(big.mp_id, small.mp_id)

    def test_counters_summed(self, world):
        m, kfs = world
        loser = self._mk(m, kfs, [(0, 0)])
        winner = self._mk(m, kfs, [(1, 1), (2, 1)])
        loser.found_count, loser.visible_count = 3, 7
        winner.found_count, winner.visible_count = 2, 4
        m.replace_map_point(loser.mp_id, winner.mp_id)
        assert winner.found_count == 5 and winner.visible_count == 11

    def test_observation_conservation(self, world):
        m, kfs = world
        rng = np.random.default_rng(17)
        for trial in range(20):
            sets = [
                sorted(rng.choice(4, size=rng.integers(1, 4), replace=False)),
                sorted(rng.choice(4, size=rng.integers(1, 5), replace=False)),
            ]
            sets.sort(key=len)
            slot = 4 + trial * 2
            loser = self._mk(m, kfs, [(int(k), slot) for k in sets[0]])
            winner = self._mk(m, kfs, [(int(k), slot + 1) for k in sets[1]])
            overlap = len(set(sets[0]) & set(sets[1]))
            before = len(winner.observations) + len(loser.observations)
            m.replace_map_point(loser.mp_id, winner.mp_id)
            assert len(winner.observations) == before - overlap
            assert m.audit() == []


class TestNeighbors:
    def test_weight_sort_with_tiebreak(self, cam):
        m = MapModel(num_levels=cam.num_levels)
        for i in range(4):
            m.insert_keyframe(make_kf(cam, i, n=24))
        # weights: (0,1)=5, (0,2)=5, (0,3)=2
        slot = 0
        for other, w in ((1, 5), (2, 5), (3, 2)):
            for _ in range(w):
                mp = m.new_map_point([0, 0, 5.0], m.keyframes[0].descriptors[slot], 0)
                m.add_observation(mp.mp_id, 0, slot)
                m.add_observation(mp.mp_id, other, slot)
                slot += 1
        assert m.covisible_neighbors(0, 2) == [1, 2]
        assert m.covisible_neighbors(0, 10) == [1, 2, 3]
        assert m.covisible_neighbors(3) == [0]
        assert m.covisible_neighbors(0, 2) == m.covisible_neighbors(0, 2)  # deterministic

    def test_isolated_keyframe(self, world):
        m, kfs = world
        assert m.covisible_neighbors(3) == []

    def test_dead_keyframe_rejected(self, world):
        m, kfs = world
        m.kill_keyframe(3)
        with pytest.raises(InvalidStateError):
            m.covisible_neighbors(3)
        with pytest.raises(InvalidArgumentError):
            m.covisible_neighbors(99)


class TestRepDescriptor:
    def test_median_minimizer(self, world):
        m, kfs = world
        # three observers; the middle descriptor minimizes the median distance
        mp = m.new_map_point([0, 0, 5.0], kfs[0].descriptors[5], 0)
        for k in range(3):
            m.add_observation(mp.mp_id, k, 5)
        descs = [kfs[k].descriptors[5] for k in range(3)]
        meds = []
        for i in range(3):
            d = sorted(hamming(descs[i], descs[j]) for j in range(3) if j != i)
            meds.append(np.median(d))
        best = int(np.argmin(meds))
        assert hamming(mp.rep_descriptor, descs[best]) == 0


class TestAudit:
    def test_clean_map(self, world):
        m, kfs = world
        assert m.audit() == []

    def test_corrupted_scale_counts_detected(self, world):
        m, kfs = world
        mp = m.new_map_point([0, 0, 5.0], kfs[0].descriptors[0], 0)
        m.add_observation(mp.mp_id, 0, 0)
        m.add_observation(mp.mp_id, 1, 0)
        m.counter_matrix[mp.mp_id, 0] += 1
        viols = m.audit()
        assert len(viols) >= 1 and any(f"map point {mp.mp_id}" in v for v in viols)

    def test_corrupted_edge_detected(self, world):
        m, kfs = world
        mp = m.new_map_point([0, 0, 5.0], kfs[0].descriptors[0], 0)
        m.add_observation(mp.mp_id, 0, 0)
        m.add_observation(mp.mp_id, 1, 0)
        m.graph.bump(0, 1, +1)
        viols = m.audit()
        assert viols and any("(0, 1)" in v for v in viols)


class TestRandomOps:
    def test_long_random_sequence_stays_consistent(self, cam):
        rng = np.random.default_rng(2025)
        m = MapModel(num_levels=cam.num_levels)
        n_kf, n_slots = 12, 40
        for i in range(n_kf):
            m.insert_keyframe(make_kf(cam, i, n=n_slots))
        for step in range(10000):
            op = rng.integers(0, 100)
            live = [p for p in m.points.values() if p.alive]
            if op < 35 or not live:
                kf_id = int(rng.integers(0, n_kf))
                kf = m.keyframes[kf_id]
                free = np.flatnonzero(kf.mp_bindings == UNBOUND)
                if len(free) == 0:
                    continue
                idx = int(rng.choice(free))
                mp = m.new_map_point(rng.normal(0, 5, 3), kf.descriptors[idx], kf_id)
                m.add_observation(mp.mp_id, kf_id, idx)
            elif op < 70:
                mp = live[int(rng.integers(0, len(live)))]
                kf_id = int(rng.integers(0, n_kf))
                kf = m.keyframes[kf_id]
                if kf_id in mp.observations:
                    continue
                free = np.flatnonzero(kf.mp_bindings == UNBOUND)
                if len(free) == 0:
                    continue
                m.add_observation(mp.mp_id, kf_id, int(rng.choice(free)))
            elif op < 90:
                mp = live[int(rng.integers(0, len(live)))]
                if mp.observations:
                    kf_id = int(rng.choice(sorted(mp.observations)))
                    m.erase_observation(mp.mp_id, kf_id)
            else:
                if len(live) >= 2:
                    a, b = rng.choice(len(live), size=2, replace=False)
                    lo, wi = live[int(a)], live[int(b)]
                    if len(lo.observations) > len(wi.observations):
                        lo, wi = wi, lo
                    m.replace_map_point(lo.mp_id, wi.mp_id)
        assert m.audit() == []
