import numpy as np
import pytest

from localmap.errors import GenerationFailedError
from localmap.geometry import hamming, project
from localmap.synth import (
    WorldConfig,
    generate_sequence,
    read_sequence,
    write_sequence,
)


class TestGenerate:
    def test_deterministic_files(self, tmp_path):
        cfg = dict(seed=42, landmark_count=150, keyframe_count=8, features_per_kf=100)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_sequence(generate_sequence(WorldConfig(**cfg)), p1)
        write_sequence(generate_sequence(WorldConfig(**cfg)), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_zero_noise_exact_reprojection(self):
        seq = generate_sequence(
            WorldConfig(seed=1, landmark_count=150, keyframe_count=6, features_per_kf=100)
        )
        cam = seq.intrinsics()
        for r in seq.records:
            for i in range(len(r.kp_u)):
                inst = int(r.landmark_ids[i])
                if inst < 0:
                    continue
                pix = project(cam, r.pose_gt.transform(seq.landmarks[inst]))
                assert abs(pix[0] - r.kp_u[i]) < 1e-9
                assert abs(pix[1] - r.kp_v[i]) < 1e-9

    def test_duplicate_count_marked(self):
        seq = generate_sequence(
            WorldConfig(
                seed=2,
                landmark_count=1000,
                keyframe_count=4,
                features_per_kf=250,
                duplicate_injection_rate=0.1,
                min_covisible=5,
            )
        )
        assert len(seq.duplicate_pairs) == 100
        assert len(seq.landmarks) == 1100
        for a, b in seq.duplicate_pairs:
            assert np.array_equal(seq.landmarks[a], seq.landmarks[b])
            assert int(seq.canonical_ids[b]) == a

    def test_covisibility_guarantee(self):
        seq = generate_sequence(
            WorldConfig(seed=3, landmark_count=300, keyframe_count=12, features_per_kf=150,
                        min_covisible=25)
        )
        prev = None
        for r in seq.records:
            ids = set(int(x) for x in r.landmark_ids if x >= 0)
            if prev is not None:
                assert len(prev & ids) >= 25
            prev = ids

    def test_unsatisfiable_covisibility_fails_with_diagnostics(self):
        with pytest.raises(GenerationFailedError) as err:
            generate_sequence(
                WorldConfig(
                    seed=4,
                    landmark_count=3,
                    keyframe_count=6,
                    features_per_kf=3,
                    min_covisible=50,
                    retry_budget=2,
                )
            )
        assert "share" in str(err.value)

    def test_pixel_noise_applied(self):
        clean = generate_sequence(
            WorldConfig(seed=5, landmark_count=200, keyframe_count=4, features_per_kf=120)
        )
        noisy = generate_sequence(
            WorldConfig(
                seed=5, landmark_count=200, keyframe_count=4, features_per_kf=120,
                pixel_noise_sigma=1.0,
            )
        )
        cam = noisy.intrinsics()
        offs = []
        for r in noisy.records:
            for i in range(len(r.kp_u)):
                inst = int(r.landmark_ids[i])
                if inst < 0:
                    continue
                pix = project(cam, r.pose_gt.transform(noisy.landmarks[inst]))
                offs.append(np.hypot(pix[0] - r.kp_u[i], pix[1] - r.kp_v[i]))
        offs = np.array(offs)
        assert 0.7 < np.mean(offs) < 1.8  # Rayleigh mean for sigma=1 is ~1.25

    def test_spurious_fraction(self):
        seq = generate_sequence(
            WorldConfig(seed=6, landmark_count=300, keyframe_count=4, features_per_kf=150,
                        spurious_feature_fraction=0.2)
        )
        for r in seq.records:
            n_spur = int((r.landmark_ids == -1).sum())
            n_real = int((r.landmark_ids >= 0).sum())
            assert n_spur == round(0.2 * n_real)

    def test_descriptor_flips_bounded(self):
        seq = generate_sequence(
            WorldConfig(seed=7, landmark_count=150, keyframe_count=4, features_per_kf=100,
                        descriptor_flip_bits=4)
        )
        base = {i: None for i in range(len(seq.landmarks))}
        for r in seq.records:
            for i, inst in enumerate(r.landmark_ids):
                if inst < 0:
                    continue
                d = r.descriptors[i]
                if base[int(inst)] is None:
                    base[int(inst)] = d
                else:
                    assert hamming(base[int(inst)], d) <= 8

    def test_pose_init_noise_starts_at_kf2(self):
        seq = generate_sequence(
            WorldConfig(seed=8, landmark_count=200, keyframe_count=6, features_per_kf=120,
                        pixel_noise_sigma=1.0)
        )
        for r in seq.records[:2]:
            assert np.array_equal(r.pose_init.quat, r.pose_gt.quat)
            assert np.array_equal(r.pose_init.trans, r.pose_gt.trans)
        assert any(
            not np.array_equal(r.pose_init.trans, r.pose_gt.trans) for r in seq.records[2:]
        )

    @pytest.mark.parametrize("kind", ["line", "orbit", "corridor-loop"])
    def test_all_trajectory_kinds_generate(self, kind):
        seq = generate_sequence(
            WorldConfig(seed=9, landmark_count=800, keyframe_count=20, features_per_kf=120,
                        trajectory=kind, min_covisible=5)
        )
        assert len(seq.records) == 20
        assert all(len(r.kp_u) > 20 for r in seq.records)


class TestRoundTrip:
    def test_read_back_equals(self, tmp_path):
        seq = generate_sequence(
            WorldConfig(seed=10, landmark_count=150, keyframe_count=5, features_per_kf=90,
                        pixel_noise_sigma=0.5, duplicate_injection_rate=0.05)
        )
        path = tmp_path / "seq.jsonl"
        write_sequence(seq, path)
        back = read_sequence(path)
        assert back.config == seq.config
        assert np.array_equal(back.landmarks, seq.landmarks)
        assert back.duplicate_pairs == seq.duplicate_pairs
        assert len(back.records) == len(seq.records)
        for a, b in zip(seq.records, back.records):
            assert np.array_equal(a.kp_u, b.kp_u)
            assert np.array_equal(a.descriptors, b.descriptors)
            assert np.array_equal(a.landmark_ids, b.landmark_ids)
            assert np.array_equal(a.pose_gt.quat, b.pose_gt.quat)
            assert np.array_equal(a.pose_init.trans, b.pose_init.trans)

    def test_keyframe_view_hides_truth(self):
        seq = generate_sequence(
            WorldConfig(seed=11, landmark_count=150, keyframe_count=4, features_per_kf=90,
                        pixel_noise_sigma=1.0)
        )
        kfs = seq.to_keyframes()
        for kf, r in zip(kfs, seq.records):
            assert np.array_equal(kf.pose.quat, r.pose_init.quat)  # not gt
            assert not hasattr(kf, "landmark_ids")
