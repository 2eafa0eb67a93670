"""The analytic capsule scene: SDF, sphere tracing, dataset generation and on-disk layout."""

import numpy as np
import pytest

from dynrecon.deformation import JointTransformSet
from dynrecon.fileio import Dataset, MissingInputError, read_dataset, read_pfm, read_png, write_dataset, write_pfm
from dynrecon.oracle import (
    CapsuleSkeleton,
    add_image_noise,
    default_cameras,
    default_skeleton,
    generate_dataset,
    raymarch_gt,
    read_cameras,
    sdf,
    swing_poses,
    write_cameras,
)
from dynrecon.rendering import RayBatch


def single_capsule(a, b, r):
    return CapsuleSkeleton([a], [b], [r], [[1.0, 1.0, 1.0]], [a])


def one_ray(o, d, near=0.1, far=10.0):
    d = np.asarray(d, float) / np.linalg.norm(d)
    return RayBatch(np.array([o], float), d[None], np.array([near]), np.array([far]), np.zeros((1, 2), int),
                    np.zeros(1, int))


def tri_consistency_violations(rec) -> list[str]:
    bad = []
    m = rec.mask
    if np.any(m != (rec.depth > 0)):
        bad.append("mask vs depth")
    norms = np.linalg.norm(rec.normal, axis=-1)
    if np.any(np.abs(norms[m] - 1.0) > 1e-6):
        bad.append("normals not unit on mask")
    if np.any(norms[~m] != 0):
        bad.append("normals defined off mask")
    return bad


class TestSdf:
    def test_axis_point(self):
        skel = single_capsule([0, 0, 0], [0, 1, 0], 0.3)
        assert sdf(skel, skel.rest_pose(), np.array([0, 0.5, 0])) == pytest.approx(-0.3)

    def test_surface_point(self):
        skel = single_capsule([0, 0, 0], [0, 1, 0], 0.3)
        assert sdf(skel, skel.rest_pose(), np.array([0.3, 0.5, 0])) == pytest.approx(0.0, abs=1e-15)

    def test_union_is_min(self):
        skel = default_skeleton()
        pose = swing_poses(skel, 10)[3]
        from dynrecon.oracle import _capsule_distances

        x = np.random.default_rng(0).uniform(-1, 1, size=(200, 3))
        per = _capsule_distances(skel, pose, x)
        assert np.all(sdf(skel, pose, x)[:, None] <= per)

    def test_invalid_radius(self):
        with pytest.raises(ValueError):
            single_capsule([0, 0, 0], [0, 1, 0], 0.0)

    def test_rest_skeleton_is_connected(self):
        skel = default_skeleton()
        neck = skel.ends[0]
        for k in (1, 2, 3):
            np.testing.assert_allclose(skel.starts[k], neck)


class TestRaymarch:
    def test_unit_sphere_depth_and_normal(self):
        skel = single_capsule([0, 0, 0], [0, 0, 0], 1.0)
        gt = raymarch_gt(skel, skel.rest_pose(), one_ray([0, 0, -3], [0, 0, 1]))
        assert gt.hit[0]
        assert gt.depth[0] == pytest.approx(2.0, abs=1e-5)
        np.testing.assert_allclose(gt.normal[0], [0, 0, -1], atol=1e-6)

    def test_normals_radial_on_sphere(self):
        skel = single_capsule([0, 0, 0], [0, 0, 0], 1.0)
        rng = np.random.default_rng(1)
        for _ in range(20):
            target = rng.uniform(-0.5, 0.5, 3)
            o = np.array([0.0, 0.0, -4.0])
            gt = raymarch_gt(skel, skel.rest_pose(), one_ray(o, target - o))
            d = (target - o) / np.linalg.norm(target - o)
            p = o + gt.depth[0] * d
            np.testing.assert_allclose(gt.normal[0], p / np.linalg.norm(p), atol=1e-5)

    def test_miss(self):
        skel = single_capsule([0, 0, 0], [0, 0, 0], 1.0)
        gt = raymarch_gt(skel, skel.rest_pose(), one_ray([0, 3, -3], [0, 0, 1]))
        assert not gt.hit[0] and gt.depth[0] == 0.0


class TestDatasetGeneration:
    def test_counting(self):
        skel = default_skeleton()
        cams = default_cameras(8, 8)[:3]
        recs = generate_dataset(skel, swing_poses(skel, 100), cams)
        assert len(recs) == 300

    def test_noise_free_is_deterministic(self):
        skel = default_skeleton()
        poses = swing_poses(skel, 2)
        a = generate_dataset(skel, poses, default_cameras(16, 16), seed=3)
        b = generate_dataset(skel, poses, default_cameras(16, 16), seed=3)
        assert all(x.rgb.tobytes() == y.rgb.tobytes() for x, y in zip(a, b))

    def test_half_normal_noise_level(self):
        img = np.full((256, 256, 3), 0.5)
        noisy = add_image_noise(img, 0.05, np.random.default_rng(0))
        assert np.mean(np.abs(noisy - img)) == pytest.approx(0.05 * np.sqrt(2 / np.pi), rel=0.02)
        assert noisy.min() >= 0 and noisy.max() <= 1

    def test_noise_leaves_geometry_clean(self):
        skel = default_skeleton()
        poses = swing_poses(skel, 1)
        clean = generate_dataset(skel, poses, default_cameras(16, 16))
        noisy = generate_dataset(skel, poses, default_cameras(16, 16), noise_sigma=0.1, seed=1)
        for a, b in zip(clean, noisy):
            np.testing.assert_array_equal(a.depth, b.depth)
            np.testing.assert_array_equal(a.normal, b.normal)
            np.testing.assert_array_equal(a.rgb, b.rgb_clean)
            assert not np.array_equal(a.rgb, b.rgb)

    def test_requires_inputs(self):
        with pytest.raises(ValueError):
            generate_dataset(default_skeleton(), [], default_cameras())

    def test_every_training_view_sees_the_figure(self):
        skel = default_skeleton()
        for rec in generate_dataset(skel, swing_poses(skel, 5), default_cameras()):
            assert 0.05 < rec.mask.mean() < 0.6
            assert not tri_consistency_violations(rec)

    def test_surface_points_on_zero_level_set(self):
        skel = default_skeleton()
        pose = swing_poses(skel, 4)[1]
        for rec in generate_dataset(skel, [pose], default_cameras()):
            d = rec.camera.directions(rec.camera.pixel_grid()).reshape(64, 64, 3)
            p = rec.camera.position + rec.depth[rec.mask][:, None] * d[rec.mask]
            assert np.max(np.abs(sdf(skel, pose, p))) < 1e-4


class TestFiles:
    def test_pfm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).normal(size=(5, 7, 3)).astype(np.float32)
        write_pfm(tmp_path / "a.pfm", img)
        np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), img)
        gray = img[..., 0]
        write_pfm(tmp_path / "b.pfm", gray)
        np.testing.assert_array_equal(read_pfm(tmp_path / "b.pfm"), gray)

    def test_pfm_is_little_endian(self, tmp_path):
        write_pfm(tmp_path / "c.pfm", np.ones((2, 2), dtype=np.float32))
        assert b"\n-1" in (tmp_path / "c.pfm").read_bytes()[:20]

    def test_camera_file_round_trip(self, tmp_path):
        cams = default_cameras(32, 24)
        write_cameras(tmp_path / "cameras.txt", cams, ["train", "train", "train", "test"])
        back, roles = read_cameras(tmp_path / "cameras.txt")
        assert roles[-1] == "test"
        for a, b in zip(cams, back):
            np.testing.assert_array_equal(a.rotation, b.rotation)
            assert (a.fx, a.width, a.height) == (b.fx, b.width, b.height)

    def test_dataset_round_trip(self, tmp_path):
        skel = default_skeleton()
        poses = swing_poses(skel, 2)
        cams = default_cameras(16, 16)
        roles = ["train"] * 3 + ["test"]
        ds = Dataset(generate_dataset(skel, poses, cams, 0.05, seed=2), cams, roles, skel, poses, 2, 0.05)
        write_dataset(tmp_path / "ds", ds)
        for sub in ("frames", "depth", "normal", "mask"):
            assert (tmp_path / "ds" / sub / "0001_cam3.png").exists() or (tmp_path / "ds" / sub / "0001_cam3.pfm").exists()
        back = read_dataset(tmp_path / "ds")
        assert back.noise_sigma == 0.05 and back.seed == 2
        assert back.camera_indices("test") == [3]
        for a, b in zip(ds.records, back.records):
            np.testing.assert_array_equal(a.mask, b.mask)
            np.testing.assert_allclose(b.depth, a.depth, rtol=1e-6)
            np.testing.assert_allclose(b.rgb, a.rgb, atol=0.5 / 255 + 1e-6)
            np.testing.assert_allclose(b.rgb_clean, a.rgb_clean, atol=0.5 / 255 + 1e-6)

    def test_png_round_trip(self, tmp_path):
        from dynrecon.fileio import write_png

        img = np.random.default_rng(0).uniform(size=(4, 4, 3))
        write_png(tmp_path / "x.png", img)
        np.testing.assert_allclose(read_png(tmp_path / "x.png"), img, atol=0.5 / 255 + 1e-6)

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(MissingInputError, match="nowhere"):
            read_dataset(tmp_path / "nowhere")

    def test_skeleton_text_round_trip(self):
        skel = default_skeleton()
        back = CapsuleSkeleton.from_text(skel.to_text())
        np.testing.assert_array_equal(skel.starts, back.starts)
        assert back.names == skel.names


def test_swing_poses_are_rigid_about_pivots():
    skel = default_skeleton()
    for pose in swing_poses(skel, 12):
        assert isinstance(pose, JointTransformSet)
        for k in range(skel.num_joints):
            np.testing.assert_allclose(pose.apply(k, skel.pivots[k]), skel.pivots[k], atol=1e-12)
