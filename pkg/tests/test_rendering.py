"""Cameras, sampling, quadrature compositing, density normals and surface points."""

import numpy as np
import pytest

from dynrecon import autodiff as ad
from dynrecon.deformation import FrameDeformation
from dynrecon.fields import CanonicalFieldNetwork, FieldConfig, init_parameters
from dynrecon.oracle import default_skeleton, swing_poses
from dynrecon.rendering import (
    Camera,
    PosedDensity,
    Ray,
    RayBatch,
    RaySamples,
    accumulated_opacity,
    composite_color,
    composite_depth,
    composite_weights,
    density_normal,
    fd_density_normal,
    generate_rays,
    render_rays,
    sample_deltas,
    sample_stratified,
    surface_point,
)


def axis_camera(f=2.0, w=5, h=5):
    return Camera(f, f, w / 2.0, h / 2.0, w, h, np.eye(3), np.zeros(3))


def gaussian_density(mu):
    mu = np.asarray(mu, dtype=np.float64)

    def fn(x, anchor=None):
        r2 = ad.sum_(ad.square(ad.sub(x, mu)), axis=-1)
        return ad.exp(ad.scale(r2, -0.5))

    return fn


def samples(sigma, color, tau):
    tau = np.asarray(tau, dtype=np.float64)
    far = tau[..., -1] + (tau[..., -1] - tau[..., -2] if tau.shape[-1] > 1 else 1.0)
    return RaySamples(tau, sigma, color, sample_deltas(tau, far))


class TestCamera:
    def test_principal_point_ray_is_optical_axis(self):
        d = axis_camera().directions([[2, 2]])[0]
        np.testing.assert_allclose(d, [0, 0, 1], atol=1e-15)

    def test_one_focal_length_off_center_is_45_degrees(self):
        cam = Camera(2.0, 2.0, 0.5, 0.5, 8, 8, np.eye(3), np.zeros(3))
        d = cam.directions([[2, 0]])[0]
        assert np.degrees(np.arctan2(d[0], d[2])) == pytest.approx(45.0)

    def test_adjacent_pixels_small_angle(self):
        f = 500.0
        cam = Camera(f, f, 320, 240, 640, 480, np.eye(3), np.zeros(3))
        d = cam.directions([[320, 240], [321, 240]])
        assert np.arccos(np.clip(d[0] @ d[1], -1, 1)) == pytest.approx(1 / f, rel=1e-4)

    def test_rays_unit_and_through_pixel_centers(self):
        cam = Camera.look_at([1.0, 2.0, 3.0], [0, 0, 0], [0, 1, 0], 40.0, 16, 12)
        px = cam.pixel_grid()
        rays = generate_rays(cam, px, frame=3, near=0.5, far=6.0)
        np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-12)
        uvz = cam.project(rays.origins + 2.0 * rays.directions)
        np.testing.assert_allclose(uvz[:, :2], px, atol=1e-9)
        assert np.all(rays.frames == 3)

    def test_look_at_faces_target_with_image_y_down(self):
        cam = Camera.look_at([0, 0, -3], [0, 0, 0], [0, 1, 0], 10.0, 9, 9)
        np.testing.assert_allclose(cam.rotation[:, 2], [0, 0, 1], atol=1e-12)
        np.testing.assert_allclose(cam.rotation[:, 1], [0, -1, 0], atol=1e-12)
        assert np.linalg.det(cam.rotation) == pytest.approx(1.0)

    def test_out_of_bounds_pixel_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            generate_rays(axis_camera(), [[5, 0]], 0, 1.0, 2.0)

    def test_invalid_camera_rejected(self):
        with pytest.raises(ValueError):
            Camera(-1.0, 1.0, 0, 0, 4, 4, np.eye(3), np.zeros(3))
        with pytest.raises(ValueError):
            Camera(1.0, 1.0, 0, 0, 4, 4, 2 * np.eye(3), np.zeros(3))


class TestRay:
    def test_non_unit_direction_rejected(self):
        with pytest.raises(ValueError):
            Ray(np.zeros(3), np.array([0, 0, 2.0]), 1.0, 2.0)

    def test_bounds_ordering(self):
        with pytest.raises(ValueError):
            Ray(np.zeros(3), np.array([0, 0, 1.0]), 2.0, 1.0)

    def test_batch_indexing(self):
        rays = generate_rays(axis_camera(), [[0, 0], [1, 2]], 4, 1.0, 3.0)
        r = rays[1]
        assert isinstance(r, Ray) and r.pixel == (1, 2) and r.frame == 4
        assert len(RayBatch.from_rays([rays[0], rays[1]])) == 2


class TestSampling:
    def test_midpoints(self):
        tau = sample_stratified(np.array([1.0]), np.array([3.0]), 4)
        np.testing.assert_allclose(tau[0], 1.0 + (np.arange(4) + 0.5) * 0.5)

    def test_random_draws_stay_in_bins(self):
        rng = np.random.default_rng(0)
        near, far = np.full(200, 1.0), np.full(200, 3.0)
        tau = sample_stratified(near, far, 16, rng)
        assert tau.min() >= 1.0 and tau.max() <= 3.0
        assert np.all(np.diff(tau, axis=-1) > 0)
        width = 2.0 / 16
        bins = np.floor((tau - 1.0) / width)
        np.testing.assert_array_equal(bins, np.broadcast_to(np.arange(16), bins.shape))

    def test_mean_spacing(self):
        tau = sample_stratified(np.array([1.0]), np.array([3.0]), 64, np.random.default_rng(1))
        deltas = sample_deltas(tau, np.array([3.0]))
        assert deltas.sum() + (tau[0, 0] - 1.0) == pytest.approx(2.0)
        assert np.mean(np.diff(sample_stratified(np.array([1.0]), np.array([3.0]), 64)[0])) == pytest.approx(2 / 64)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            sample_stratified(np.array([1.0]), np.array([2.0]), 1)

    def test_sample_validation(self):
        with pytest.raises(ValueError):
            RaySamples(np.array([1.0, 1.0]), np.zeros(2), np.zeros((2, 3)), np.ones(2))
        with pytest.raises(ValueError):
            RaySamples(np.array([1.0, 2.0]), np.array([1.0, -1.0]), np.zeros((2, 3)), np.ones(2))


class TestCompositing:
    def test_empty_space(self):
        s = samples(np.zeros(8), np.ones((8, 3)), np.linspace(1, 2, 8))
        np.testing.assert_array_equal(composite_color(s), 0.0)
        assert composite_depth(s) == 0.0
        assert accumulated_opacity(s) == 0.0

    def test_single_sample_half_opacity(self):
        s = RaySamples(np.array([1.0]), np.array([np.log(2.0)]), np.array([[1.0, 0, 0]]), np.array([1.0]))
        np.testing.assert_allclose(composite_color(s), [0.5, 0, 0], atol=1e-15)

    @pytest.mark.parametrize("J", [1, 8, 64])
    def test_constant_field_closed_form(self, J):
        rng = np.random.default_rng(J)
        for _ in range(50):
            near, far = rng.uniform(0.5, 2), rng.uniform(2.5, 5)
            sigma0 = rng.uniform(0, 5)
            c = rng.uniform(0, 1, 3)
            edges = np.linspace(near, far, J + 1)
            s = RaySamples(edges[:-1], np.full(J, sigma0), np.tile(c, (J, 1)), np.diff(edges))
            np.testing.assert_allclose(composite_color(s), c * (1 - np.exp(-sigma0 * (far - near))), atol=1e-6)

    def test_two_half_surfaces(self):
        tau = np.array([1.0, 2.0, 3.0])
        deltas = np.array([1.0, 1.0, 1.0])
        sigma = np.array([np.log(2.0), 0.0, np.log(2.0)])
        s = RaySamples(tau, sigma, np.zeros((3, 3)), deltas)
        assert composite_depth(s) == pytest.approx(0.5 * 1.0 + 0.25 * 3.0)

    def test_opaque_wall(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            near, far = 1.0, rng.uniform(2, 6)
            tau = sample_stratified(np.array([near]), np.array([far]), 64, rng)[0]
            wall = rng.uniform(near + 0.1, far - 0.1)
            j = np.searchsorted(tau, wall)
            sigma = np.where(np.arange(64) >= j, 1e4, 0.0)
            s = RaySamples(tau, sigma, np.zeros((64, 3)), sample_deltas(tau, far))
            assert abs(composite_depth(s) - wall) <= (far - near) / 64 * 2

    def test_energy_bound_and_color_bound(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            sigma = rng.exponential(2.0, size=16)
            c = rng.uniform(0, 1, (16, 3))
            s = samples(sigma, c, np.sort(rng.uniform(0, 4, 16)) + np.arange(16) * 1e-3)
            acc = accumulated_opacity(s)
            assert 0.0 <= acc <= 1.0 + 1e-12
            assert np.all(composite_color(s) <= c.max(axis=0) + 1e-12)

    def test_monotone_occlusion(self):
        rng = np.random.default_rng(4)
        sigma = rng.exponential(1.0, size=10)
        deltas = rng.uniform(0.05, 0.3, size=10)
        base = composite_weights(sigma, deltas).data
        for j in range(10):
            bumped = sigma.copy()
            bumped[j] += 2.0
            w = composite_weights(bumped, deltas).data
            assert np.all(w[j + 1 :] <= base[j + 1 :] + 1e-15)

    def test_depth_bounds(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            near, far = 1.0, 4.0
            tau = sample_stratified(np.array([near]), np.array([far]), 32, rng)[0]
            sigma = rng.exponential(3.0, size=32)
            s = RaySamples(tau, sigma, np.zeros((32, 3)), sample_deltas(tau, far))
            assert 0.0 <= composite_depth(s) <= far
        s = RaySamples(tau, np.full(32, 1e5), np.zeros((32, 3)), sample_deltas(tau, far))
        assert near <= composite_depth(s) <= far

    def test_gradient_wrt_density(self):
        rng = np.random.default_rng(6)
        tau = np.linspace(1, 2, 12)
        deltas = sample_deltas(tau, 2.1)
        c = rng.uniform(0, 1, (12, 3))

        def f(s):
            return ad.sum_(composite_color(RaySamples(tau, s, c, deltas)))

        assert ad.grad_check(f, rng.exponential(2.0, size=12), 1e-6) < 1e-3


class TestNormals:
    def test_gaussian_normal_points_outward(self):
        mu = np.array([0.1, -0.2, 0.3])
        x = np.random.default_rng(0).normal(size=(50, 3))
        n = density_normal(gaussian_density(mu), x)
        expected = (x - mu) / np.linalg.norm(x - mu, axis=1, keepdims=True)
        np.testing.assert_allclose(n, expected, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)

    def test_constant_density_is_sentinel(self):
        def const(x, anchor=None):
            return ad.add(ad.scale(ad.sum_(x, axis=-1), 0.0), 1.0)

        n = density_normal(const, np.ones((4, 3)))
        assert np.all(np.isnan(n))
        _, valid = fd_density_normal(const, ad.Tensor(np.ones((4, 3))))
        assert not valid.any()

    def test_finite_difference_normal_matches_autodiff(self):
        mu = np.zeros(3)
        x = np.random.default_rng(1).normal(size=(20, 3))
        n_fd, valid = fd_density_normal(gaussian_density(mu), ad.Tensor(x), step=1e-3)
        assert valid.all()
        np.testing.assert_allclose(n_fd.data, density_normal(gaussian_density(mu), x), atol=1e-5)

    def test_finite_difference_normal_is_differentiable(self):
        """Gradients reach the density's parameters through the tape-recorded differences."""
        x = np.random.default_rng(2).normal(size=(6, 3))
        target = np.random.default_rng(3).normal(size=(6, 3))

        def loss(mu):
            n, _ = fd_density_normal(gaussian_density_tensor(mu), ad.Tensor(x))
            return ad.sum_(ad.mul(n, target))

        assert ad.grad_check(loss, np.array([0.2, -0.1, 0.4]), 1e-6) < 1e-3

    def test_posed_density_normal_on_real_network(self):
        skel = default_skeleton()
        pose = swing_poses(skel, 6)[1]
        params = init_parameters(FieldConfig(density_depth=2, density_width=16, skip_layer=1, color_width=8,
                                             code_dim=4, num_frames=6), seed=0)
        params.arrays = {k: v.astype(np.float64) for k, v in params.arrays.items()}
        net = CanonicalFieldNetwork(params)
        dens = PosedDensity(net, net.bind(), FrameDeformation(pose, skel.posed_segments(pose)))
        x = np.random.default_rng(4).uniform(-0.5, 0.5, size=(10, 3))
        n_ad = density_normal(lambda t: dens(t, anchor=x), x)
        # the ReLU network is only piecewise smooth, so keep the step well below kink spacing
        n_fd, _ = fd_density_normal(dens, ad.Tensor(x), step=1e-7)
        np.testing.assert_allclose(n_fd.data, n_ad, atol=1e-5)


def gaussian_density_tensor(mu):
    def fn(x, anchor=None):
        r2 = ad.sum_(ad.square(ad.sub(x, mu)), axis=-1)
        return ad.exp(ad.scale(r2, -0.5))

    return fn


class TestSurfacePoint:
    def test_axis_ray(self):
        pts, n = surface_point(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), np.array([2.0]), 1.0, 3.0)
        np.testing.assert_array_equal(pts, [[0, 0, 2.0]])
        assert n == 0

    def test_near_plane(self):
        pts, _ = surface_point(np.zeros((1, 3)), np.array([[0, 1.0, 0]]), np.array([1.0]), 1.0, 3.0)
        np.testing.assert_array_equal(pts, [[0, 1.0, 0]])

    def test_out_of_range_is_clamped_and_counted(self):
        pts, n = surface_point(np.zeros((2, 3)), np.array([[0, 0, 1.0]] * 2), np.array([0.2, 9.0]), 1.0, 3.0)
        np.testing.assert_array_equal(pts[:, 2], [1.0, 3.0])
        assert n == 2

    def test_opaque_wall_surface(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            wall = rng.uniform(1.5, 3.5)
            tau = sample_stratified(np.array([1.0]), np.array([4.0]), 64)[0]
            sigma = np.where(tau >= wall, 1e4, 0.0)
            depth = composite_depth(RaySamples(tau, sigma, np.zeros((64, 3)), sample_deltas(tau, 4.0)))
            pts, _ = surface_point(np.zeros((1, 3)), d[None], np.array([depth]), 1.0, 4.0)
            assert abs(pts[0] @ d - wall) <= 3.0 / 64 + 1e-12


class TestRenderRays:
    def test_zero_density_shows_background(self):
        cfg = FieldConfig(density_depth=2, density_width=8, skip_layer=1, color_width=8, code_dim=4, num_frames=2)
        params = init_parameters(cfg, seed=0)
        params.arrays["sigma.b"][...] = -50.0
        params.arrays["sigma.W"][...] = 0.0
        net = CanonicalFieldNetwork(params)
        skel = default_skeleton()
        pose = swing_poses(skel, 2)[0]
        rays = generate_rays(Camera.look_at([0, 0, 3], [0, 0, 0], [0, 1, 0], 20.0, 4, 4),
                             np.array([[1, 1], [2, 2]]), 0, 2.0, 4.0)
        out = render_rays(net, net.bind(), rays, {0: FrameDeformation(pose, skel.posed_segments(pose))}, 16, None,
                          background=(0.2, 0.4, 0.6))
        np.testing.assert_allclose(out.rgb.data, [[0.2, 0.4, 0.6]] * 2, atol=1e-6)
        np.testing.assert_allclose(out.acc.data, 0.0, atol=1e-6)
