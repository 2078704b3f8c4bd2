import numpy as np
import pytest

from arbor.camera import (
    Camera,
    Extrinsics,
    Intrinsics,
    Ray,
    closest_point_on_line,
    epipolar_line,
    fundamental_matrix,
    parallel_plane_intersect,
    pixel_ray,
    project,
    solve_pnp,
)
from arbor.errors import (
    CoincidentCenters,
    DegenerateConfiguration,
    NonPositiveDepth,
    RayParallelToPlane,
)

from helpers import identity_camera, looking_at_camera, random_camera


class TestTypes:
    def test_extrinsics_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            Extrinsics(np.eye(3) * 2.0, np.zeros(3))

    def test_extrinsics_rejects_reflection(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Extrinsics(R, np.zeros(3))

    def test_intrinsics_invariants(self):
        with pytest.raises(ValueError):
            Intrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(ValueError):
            Intrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)

    def test_ray_normalizes(self):
        r = Ray(np.zeros(3), np.array([0.0, 0.0, 2.0]))
        assert abs(np.linalg.norm(r.direction) - 1.0) < 1e-12


class TestProject:
    def test_optical_axis(self):
        cam = identity_camera()
        assert np.allclose(project(cam, [0, 0, 1]), [0, 0])

    def test_hand_computed(self):
        cam = identity_camera(fx=100, fy=100, cx=50, cy=50, width=200, height=200)
        assert np.allclose(project(cam, [1, 1, 2]), [100, 100])

    def test_behind_camera_raises(self):
        cam = identity_camera()
        with pytest.raises(NonPositiveDepth):
            project(cam, [0, 0, -1])

    def test_unproject_roundtrip_random_pose(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            cam = random_camera(rng)
            # point at known depth along a random in-bounds pixel ray
            pixel = rng.uniform([0, 0], [640, 480])
            depth = rng.uniform(0.5, 10.0)
            ray = pixel_ray(cam, pixel)
            # reconstruct target point at camera depth `depth`
            zc = np.dot(ray.direction, cam.view_axis)
            point = ray.at(depth / zc)
            assert np.allclose(project(cam, point), pixel, atol=1e-9)


class TestPixelRay:
    def test_principal_point_gives_axis(self):
        cam = identity_camera()
        ray = pixel_ray(cam, [0, 0])
        assert np.allclose(ray.direction, [0, 0, 1], atol=1e-12)

    def test_project_roundtrip_100_random_pixels(self):
        rng = np.random.default_rng(11)
        cam = random_camera(rng)
        for _ in range(100):
            pixel = rng.uniform([0, 0], [640, 480])
            ray = pixel_ray(cam, pixel)
            for s in (0.3, 1.0, 5.0):
                assert np.allclose(project(cam, ray.at(s)), pixel, atol=1e-9)

    def test_origin_is_optical_center(self):
        rng = np.random.default_rng(3)
        cam = random_camera(rng)
        ray = pixel_ray(cam, [100, 100])
        R, t = cam.extrinsics.R, cam.extrinsics.t
        assert np.allclose(ray.origin, -R.T @ t, atol=1e-12)


class TestParallelPlaneIntersect:
    def test_axis_anchor(self):
        cam = identity_camera()
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert np.allclose(parallel_plane_intersect(cam, ray, [0, 0, 5]), [0, 0, 5])

    def test_similar_triangles(self):
        cam = identity_camera()
        ray = Ray(np.zeros(3), np.array([1.0, 0.0, 1.0]) / np.sqrt(2))
        assert np.allclose(parallel_plane_intersect(cam, ray, [0, 0, 5]), [5, 0, 5])

    def test_parallel_ray_raises(self):
        cam = identity_camera()
        ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]))
        with pytest.raises(RayParallelToPlane):
            parallel_plane_intersect(cam, ray, [0, 0, 5])

    def test_depth_matches_anchor_random(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            cam = random_camera(rng)
            anchor = rng.uniform(-3, 3, size=3)
            d = rng.standard_normal(3)
            if abs(np.dot(d / np.linalg.norm(d), cam.view_axis)) < 1e-3:
                continue
            ray = Ray(rng.uniform(-3, 3, size=3), d)
            p = parallel_plane_intersect(cam, ray, anchor)
            assert abs(np.dot(p - anchor, cam.view_axis)) < 1e-9


class TestFundamentalMatrix:
    def test_rectified_pair_horizontal_lines(self):
        c1 = looking_at_camera("l", [0, 0, 0], [0, 0, 10])
        c2 = looking_at_camera("r", [1, 0, 0], [1, 0, 10])
        F = fundamental_matrix(c1, c2)
        line = epipolar_line(F, [300.0, 200.0])
        # horizontal line: a ~ 0 and -c/b equals the source row
        a, b, c = line
        assert abs(a) < 1e-9 * abs(b)
        assert abs(-c / b - 200.0) < 1e-6

    def test_bilinear_form_vanishes_random(self):
        rng = np.random.default_rng(13)
        c1, c2 = random_camera(rng, "a"), random_camera(rng, "b")
        F = fundamental_matrix(c1, c2)
        hits = 0
        for _ in range(100):
            X = rng.uniform(-5, 5, size=3)
            try:
                x1, x2 = project(c1, X), project(c2, X)
            except NonPositiveDepth:
                continue
            h1 = np.array([x1[0], x1[1], 1.0])
            h2 = np.array([x2[0], x2[1], 1.0])
            assert abs(h2 @ F @ h1) < 1e-9 * np.linalg.norm(h1) * np.linalg.norm(h2)
            hits += 1
        assert hits > 20

    def test_rank_two(self):
        rng = np.random.default_rng(17)
        F = fundamental_matrix(random_camera(rng, "a"), random_camera(rng, "b"))
        s = np.linalg.svd(F, compute_uv=False)
        assert s[2] < 1e-9 * s[0]

    def test_coincident_centers_raises(self):
        rng = np.random.default_rng(19)
        cam = random_camera(rng)
        with pytest.raises(CoincidentCenters):
            fundamental_matrix(cam, cam)

    def test_closest_point_on_line(self):
        p = closest_point_on_line((0.0, 1.0, -5.0), [3.0, 9.0])  # line y = 5
        assert np.allclose(p, [3.0, 5.0])


def _synthesize_correspondences(cam, n, rng, noise_px=0.0):
    pts, pix = [], []
    while len(pts) < n:
        X = cam.center + rng.uniform(1.0, 8.0) * cam.view_axis + rng.uniform(-2, 2, size=3)
        try:
            x = project(cam, X)
        except NonPositiveDepth:
            continue
        if noise_px:
            x = x + rng.normal(0, noise_px, size=2)
        pts.append(X)
        pix.append(x)
    return list(zip(pts, pix))


class TestSolvePnP:
    def test_exact_recovery(self):
        rng = np.random.default_rng(23)
        for _ in range(5):
            cam = random_camera(rng)
            corr = _synthesize_correspondences(cam, 20, rng)
            res = solve_pnp(corr, cam.intrinsics)
            assert np.max(np.abs(res.extrinsics.R - cam.extrinsics.R)) < 1e-6
            assert np.max(np.abs(res.extrinsics.t - cam.extrinsics.t)) < 1e-6
            assert res.rms_px < 1e-6

    def test_noisy_rms_bounded(self):
        rng = np.random.default_rng(29)
        for seed in range(10):
            cam = random_camera(rng)
            corr = _synthesize_correspondences(cam, 50, rng, noise_px=1.0)
            res = solve_pnp(corr, cam.intrinsics)
            assert res.rms_px <= 2.0

    def test_five_points_degenerate(self):
        rng = np.random.default_rng(31)
        cam = random_camera(rng)
        corr = _synthesize_correspondences(cam, 5, rng)
        with pytest.raises(DegenerateConfiguration):
            solve_pnp(corr, cam.intrinsics)

    def test_coplanar_points_degenerate(self):
        cam = identity_camera(fx=500, fy=500, cx=320, cy=240)
        rng = np.random.default_rng(37)
        corr = []
        for _ in range(12):
            X = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), 5.0])  # one plane
            corr.append((X, project(cam, X)))
        with pytest.raises(DegenerateConfiguration):
            solve_pnp(corr, cam.intrinsics)

    def test_rms_history_non_increasing(self):
        rng = np.random.default_rng(41)
        cam = random_camera(rng)
        corr = _synthesize_correspondences(cam, 30, rng, noise_px=2.0)
        res = solve_pnp(corr, cam.intrinsics)
        hist = np.array(res.rms_history)
        assert np.all(np.diff(hist) <= 1e-12)

    def test_ransac_rejects_outliers(self):
        rng = np.random.default_rng(43)
        cam = random_camera(rng)
        corr = _synthesize_correspondences(cam, 40, rng, noise_px=0.5)
        # corrupt a quarter of the matches
        bad = [(X, x + rng.uniform(80, 200, size=2)) for X, x in corr[:10]]
        res = solve_pnp(bad + corr[10:], cam.intrinsics, ransac=True, seed=1)
        assert res.rms_px <= 2.0
        assert np.max(np.abs(res.extrinsics.t - cam.extrinsics.t)) < 0.05
