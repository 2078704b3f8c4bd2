"""Tests for lifting image annotations into 3D branch geometry."""

import numpy as np
import pytest

import arbor.multiview as mv
from arbor.annotation import AnnotationVertex, ImageAnnotation
from arbor.camera import Camera, Extrinsics, Intrinsics, Ray, pixel_ray, project
from arbor.errors import (
    CycleDetected,
    DegenerateRays,
    InvalidParams,
    NoObservations,
)
from helpers import looking_at_camera, random_rotation


# ----------------------------------------------------------------- oracles

def ray_cost(rays, x):
    """Sum of squared point-to-ray distances, written from the definition."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for r in rays:
        v = x - r.origin
        total += float(v @ v - (v @ r.direction) ** 2)
    return total


def grid_search_min(rays, center, half, levels=10, n=13):
    """Coarse-to-fine brute-force minimizer of ray_cost over a shrinking box."""
    center = np.asarray(center, dtype=float)
    for _ in range(levels):
        axes = [np.linspace(c - half, c + half, n) for c in center]
        best, best_val = center, np.inf
        for x in axes[0]:
            for y in axes[1]:
                for z in axes[2]:
                    val = ray_cost(rays, (x, y, z))
                    if val < best_val:
                        best, best_val = np.array([x, y, z]), val
        center = best
        half *= 2.0 / (n - 1)  # next box spans two grid cells
    return center


# ---------------------------------------------------------------- fixtures

def camera_ring(count, radius=8.0, height=1.5, target=(0.0, 0.0, 0.0),
                prefix="cam"):
    cams = []
    for i in range(count):
        a = 2.0 * np.pi * i / count
        pos = (radius * np.cos(a), height, radius * np.sin(a))
        cams.append(looking_at_camera(f"{prefix}{i}", pos, target))
    return cams


def annotate(cam, keypoints, edges=(), interior=(), radius_px=3.0):
    """Project a labeled 3D graph into one camera.

    keypoints: {kp_id: 3d position}; interior: [(vertex_id, 3d position)]
    unlabeled curve vertices; edges reference keypoint ids or interior ids.
    """
    vertices = []
    ids = {}
    next_id = 0
    for kp_id in sorted(keypoints):
        px = project(cam, keypoints[kp_id])
        vertices.append(AnnotationVertex(next_id, float(px[0]), float(px[1]),
                                         radius_px, keypoint=kp_id))
        ids[kp_id] = next_id
        next_id += 1
    for vid, pos in interior:
        px = project(cam, pos)
        vertices.append(AnnotationVertex(next_id, float(px[0]), float(px[1]),
                                         radius_px))
        ids[vid] = next_id
        next_id += 1
    ann_edges = [(ids[a], ids[b]) for a, b in edges]
    return ImageAnnotation(f"img_{cam.id}", cam.id, cam.intrinsics.width,
                           cam.intrinsics.height, vertices, ann_edges)


def rays_through(point, origins):
    return [Ray(np.asarray(o, float),
                np.asarray(point, float) - np.asarray(o, float))
            for o in origins]


# ------------------------------------------------------- triangulate_point

class TestTriangulatePoint:
    def test_exact_intersection(self):
        target = np.array([1.0, 2.0, 3.0])
        rays = rays_through(target, [(0, 0, 0), (10, -3, 1), (-4, 8, 2)])
        x, rms = mv.triangulate_point(rays)
        assert np.linalg.norm(x - target) < 1e-9
        assert rms < 1e-9

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        origins = rng.uniform(-5, 5, size=(6, 3))
        rays = rays_through((0.3, -0.2, 0.9), origins)
        # perturb directions so the rays are skew
        rays = [Ray(r.origin, r.direction + rng.normal(0, 1e-3, 3)) for r in rays]
        x1, _ = mv.triangulate_point(rays)
        x2, _ = mv.triangulate_point(rays[::-1])
        assert np.allclose(x1, x2, atol=1e-12)

    def test_rigid_equivariance(self):
        rng = np.random.default_rng(7)
        origins = rng.uniform(-5, 5, size=(5, 3))
        rays = [Ray(o, np.array([0.1, 0.4, 1.0]) - o + rng.normal(0, 1e-2, 3))
                for o in origins]
        R = random_rotation(rng)
        T = rng.uniform(-3, 3, 3)
        moved = [Ray(R @ r.origin + T, R @ r.direction) for r in rays]
        x, _ = mv.triangulate_point(rays)
        xm, _ = mv.triangulate_point(moved)
        assert np.allclose(xm, R @ x + T, atol=1e-9)

    def test_parallel_rays_degenerate(self):
        d = (0.0, 0.0, 1.0)
        rays = [Ray((0, 0, 0), d), Ray((1, 0, 0), d), Ray((0, 1, 0), d)]
        with pytest.raises(DegenerateRays):
            mv.triangulate_point(rays)

    def test_single_ray_rejected(self):
        with pytest.raises(DegenerateRays):
            mv.triangulate_point([Ray((0, 0, 0), (0, 0, 1))])

    def test_matches_grid_search_three_perturbed_rays(self):
        rng = np.random.default_rng(11)
        target = np.array([0.2, -0.3, 0.4])
        rays = []
        for o in [(4, 0, 0), (0, 4, 1), (-3, -2, 2)]:
            d = target - np.asarray(o, float) + rng.normal(0, 0.02, 3)
            rays.append(Ray(o, d))
        x, _ = mv.triangulate_point(rays)
        oracle = grid_search_min(rays, center=(0, 0, 0), half=1.0)
        assert np.linalg.norm(x - oracle) < 1e-3

    def test_matches_grid_search_ten_noisy_cameras(self):
        # ten-camera bundle with ~1px of direction noise at f=800
        rng = np.random.default_rng(19)
        cams = camera_ring(10)
        target = np.array([0.1, 0.3, -0.2])
        rays = []
        for cam in cams:
            px = project(cam, target) + rng.normal(0, 1.0, 2)
            rays.append(pixel_ray(cam, px))
        x, _ = mv.triangulate_point(rays)
        oracle = grid_search_min(rays, center=(0, 0, 0), half=2.0)
        assert np.linalg.norm(x - oracle) < 1e-3


# --------------------------------------------------- triangulate_keypoints

class TestTriangulateKeypoints:
    def synthetic_tree(self, rng, n_points=12):
        return {f"k{i:02d}": rng.uniform(-1.5, 1.5, 3) for i in range(n_points)}

    def test_exact_recovery(self):
        rng = np.random.default_rng(23)
        points = self.synthetic_tree(rng)
        cams = camera_ring(6)
        anns = [annotate(cam, points) for cam in cams]
        kps, report = mv.triangulate_keypoints(anns, cams)
        assert len(kps) == len(points)
        assert report == []
        for kp in kps:
            assert np.linalg.norm(kp.position - points[kp.id]) < 1e-6
            assert len(kp.observations) == len(cams)

    def test_single_observation_skipped(self):
        cams = camera_ring(2)
        points = {"ka": np.array([0.0, 0.0, 0.0]), "kb": np.array([1.0, 0.0, 0.0])}
        anns = [annotate(cams[0], points),
                annotate(cams[1], {"ka": points["ka"]})]
        kps, report = mv.triangulate_keypoints(anns, cams)
        assert [k.id for k in kps] == ["ka"]
        assert any(r["kind"] == "skipped-keypoint" and r["keypoint"] == "kb"
                   for r in report)

    def test_misaligned_only_skipped(self):
        good = camera_ring(2)
        bad = [looking_at_camera("bad0", (0, 0, -9), (0, 0, 0), aligned=False),
               looking_at_camera("bad1", (1, 0, -9), (0, 0, 0), aligned=False)]
        points = {"ka": np.array([0.2, 0.1, 0.0])}
        anns = [annotate(c, points) for c in bad]
        kps, report = mv.triangulate_keypoints(anns, good + bad)
        assert kps == []
        assert any(r["kind"] == "skipped-keypoint" for r in report)

    def test_low_diversity_warning(self):
        c0 = looking_at_camera("c0", (8.0, 0.0, 0.0), (0, 0, 0))
        c1 = looking_at_camera("c1", (8.0, 0.2, 0.0), (0, 0, 0))
        points = {"ka": np.array([0.0, 0.0, 0.0])}
        anns = [annotate(c, points) for c in (c0, c1)]
        kps, report = mv.triangulate_keypoints(anns, [c0, c1])
        assert len(kps) == 1
        assert any(r["kind"] == "low-viewpoint-diversity" for r in report)


# ------------------------------------------------------- transfer_topology

def chain_annotation(cam, kp_a, kp_b, pos_a, pos_b, n_interior=2):
    """Annotation with a curve kp_a ... kp_b through unlabeled interiors."""
    interior = []
    edges = []
    prev = kp_a
    for i in range(n_interior):
        f = (i + 1) / (n_interior + 1)
        vid = f"i{i}"
        interior.append((vid, (1 - f) * np.asarray(pos_a) + f * np.asarray(pos_b)))
        edges.append((prev, vid))
        prev = vid
    edges.append((prev, kp_b))
    return annotate(cam, {kp_a: pos_a, kp_b: pos_b}, edges, interior)


class TestTransferTopology:
    def setup_method(self):
        self.cams = camera_ring(4)
        self.pa = np.array([-0.8, 0.0, 0.0])
        self.pb = np.array([0.8, 0.4, 0.2])
        anns = [annotate(c, {"ka": self.pa, "kb": self.pb}) for c in self.cams]
        self.kps, _ = mv.triangulate_keypoints(anns, self.cams)

    def test_curve_in_one_image(self):
        anns = [chain_annotation(self.cams[0], "ka", "kb", self.pa, self.pb),
                annotate(self.cams[1], {"ka": self.pa, "kb": self.pb})]
        branch = mv.transfer_topology(anns, self.kps)
        assert branch.edges == [(0, 1)]
        assert sorted(v.keypoint for v in branch.vertices) == ["ka", "kb"]

    def test_union_over_images(self):
        anns = [chain_annotation(c, "ka", "kb", self.pa, self.pb)
                for c in self.cams[:2]]
        branch = mv.transfer_topology(anns, self.kps)
        assert branch.edges == [(0, 1)]

    def test_idempotent(self):
        anns = [chain_annotation(c, "ka", "kb", self.pa, self.pb)
                for c in self.cams[:3]]
        b1 = mv.transfer_topology(anns, self.kps)
        b2 = mv.transfer_topology(anns, self.kps)
        assert b1.edges == b2.edges
        assert [v.id for v in b1.vertices] == [v.id for v in b2.vertices]

    def test_disjoint_keypoint_flagged(self):
        anns = [chain_annotation(self.cams[0], "ka", "kb", self.pa, self.pb)]
        pc = np.array([0.0, -0.9, 0.3])
        extra = [annotate(c, {"kc": pc}) for c in self.cams[:2]]
        kps, _ = mv.triangulate_keypoints(
            anns + extra + [annotate(self.cams[1], {"ka": self.pa, "kb": self.pb})],
            self.cams)
        branch = mv.transfer_topology(anns, kps)
        report = mv.validate_branch(branch)
        isolated = [r for r in report if r["kind"] == "isolated-vertex"]
        assert len(isolated) == 1

    def test_keypoint_in_the_middle_splits_curve(self):
        cam = self.cams[0]
        pm = (self.pa + self.pb) / 2
        ann = annotate(cam, {"ka": self.pa, "km": pm, "kb": self.pb},
                       edges=[("ka", "km"), ("km", "kb")])
        anns = [ann, annotate(self.cams[1],
                              {"ka": self.pa, "km": pm, "kb": self.pb})]
        kps, _ = mv.triangulate_keypoints(anns, self.cams[:2])
        branch = mv.transfer_topology(anns, kps)
        # sorted keypoint ids assign ka=0, kb=1, km=2
        assert branch.edges == [(0, 2), (1, 2)]


# -------------------------------------------------------- subdivide_curves

class TestSubdivideCurves:
    def test_straight_branch_exact(self):
        # segment on the ring axis: by symmetry every camera sees the same
        # foreshortening, so matching image fractions pin the same 3D points
        pa = np.array([0.0, -1.0, 0.0])
        pb = np.array([0.0, 1.0, 0.0])
        cams = camera_ring(4, radius=8.0, height=0.0)
        anns = [chain_annotation(c, "ka", "kb", pa, pb, n_interior=3)
                for c in cams]
        kps, _ = mv.triangulate_keypoints(anns, cams)
        branch = mv.transfer_topology(anns, kps)
        sub, report = mv.subdivide_curves(branch, anns, cams, n_sub=3)
        assert report == []
        assert len(sub.vertices) == 2 + 3
        seg = pb - pa
        for v in sub.vertices:
            if v.keypoint is not None:
                continue
            t = np.clip((v.position - pa) @ seg / (seg @ seg), 0, 1)
            closest = pa + t * seg
            assert np.linalg.norm(v.position - closest) < 1e-6
            assert len(v.observations) == len(cams)

    def test_nsub_zero_unchanged(self):
        pa, pb = np.array([-0.5, 0, 0]), np.array([0.5, 0, 0])
        cams = camera_ring(3)
        anns = [chain_annotation(c, "ka", "kb", pa, pb) for c in cams]
        kps, _ = mv.triangulate_keypoints(anns, cams)
        branch = mv.transfer_topology(anns, kps)
        sub, report = mv.subdivide_curves(branch, anns, cams, 0)
        assert sub is branch
        assert report == []

    @pytest.mark.parametrize("span_deg,rel_bound", [(30, 0.005), (90, 0.06)])
    def test_arc_centerline_error(self, span_deg, rel_bound):
        # circular arc of radius 1 in the xy plane, sampled densely; matched
        # image-arc-length fractions of a curved branch hit slightly different
        # true curve parameters per view, so subdivided points sit near but
        # not exactly on the arc, and the error grows with the subtended
        # angle (measured: 0.37% of arc length at 30 degrees, 5.3% at 90).
        # Either way it must beat straight-line interpolation between the
        # endpoints by a wide margin.
        cams = camera_ring(4, radius=9.0, height=2.0)
        angles = np.linspace(0.0, np.deg2rad(span_deg), 30)
        pts = np.stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)],
                       axis=1)
        interior = [(f"i{i}", pts[i]) for i in range(1, len(pts) - 1)]
        names = ["ka"] + [f"i{i}" for i in range(1, len(pts) - 1)] + ["kb"]
        edges = list(zip(names[:-1], names[1:]))
        anns = [annotate(c, {"ka": pts[0], "kb": pts[-1]}, edges, interior)
                for c in cams]
        kps, _ = mv.triangulate_keypoints(anns, cams)
        branch = mv.transfer_topology(anns, kps)
        sub, _ = mv.subdivide_curves(branch, anns, cams, n_sub=8)
        arc_length = np.deg2rad(span_deg)
        sagitta = 1.0 - np.cos(arc_length / 2)
        errs = [np.hypot(np.linalg.norm(v.position[:2]) - 1.0, v.position[2])
                for v in sub.vertices if v.keypoint is None]
        assert max(errs) <= rel_bound * arc_length
        assert max(errs) < sagitta / 3

    def test_fallback_single_view(self):
        pa, pb = np.array([-0.5, 0.1, 0]), np.array([0.5, -0.1, 0])
        cams = camera_ring(3)
        full = [annotate(c, {"ka": pa, "kb": pb}) for c in cams]
        curve = [chain_annotation(cams[0], "ka", "kb", pa, pb)]
        kps, _ = mv.triangulate_keypoints(full, cams)
        branch = mv.transfer_topology(curve, kps)
        sub, report = mv.subdivide_curves(branch, curve, cams, n_sub=1)
        assert any(r["kind"] == "subdivision-fallback" for r in report)
        mid = [v for v in sub.vertices if v.keypoint is None][0]
        assert np.allclose(mid.position, (pa + pb) / 2, atol=1e-12)

    def test_thickness_interpolated(self):
        pa, pb = np.array([-0.5, 0, 0]), np.array([0.5, 0, 0])
        cams = camera_ring(4, height=0.0)
        anns = [chain_annotation(c, "ka", "kb", pa, pb) for c in cams]
        kps, _ = mv.triangulate_keypoints(anns, cams)
        branch = mv.transfer_topology(anns, kps)
        for v in branch.vertices:
            v.thickness = 2.0 if v.keypoint == "ka" else 4.0
        sub, _ = mv.subdivide_curves(branch, anns, cams, n_sub=3)
        interior = sorted((v for v in sub.vertices if v.keypoint is None),
                          key=lambda v: v.id)
        assert [v.thickness for v in interior] == pytest.approx([2.5, 3.0, 3.5])

    def test_negative_nsub_rejected(self):
        branch = mv.Branch3D([], [])
        with pytest.raises(InvalidParams):
            mv.subdivide_curves(branch, [], [], -1)


# ------------------------------------------------------ estimate_thickness

def radius_px_for(cam, position, radius_world):
    """Pixel radius a thin disk of radius_world subtends at the vertex depth."""
    z = cam.world_to_cam(np.asarray(position, float).reshape(1, 3))[0, 2]
    f_bar = (cam.intrinsics.fx + cam.intrinsics.fy) / 2.0
    return radius_world * f_bar / z


class TestEstimateThickness:
    def test_exact_on_axis(self):
        cam = looking_at_camera("c", (0, 0, -5), (0, 0, 1))
        pos = np.array([0.0, 0.0, 0.0])  # depth 5
        r_world = 0.37
        kp = mv.Keypoint3D("k", pos, observations=[
            mv.Observation("c", tuple(project(cam, pos)),
                           radius_px_for(cam, pos, r_world)),
        ])
        assert mv.estimate_thickness(kp, [cam]) == pytest.approx(r_world, rel=1e-9)

    def test_exact_off_axis_multi_camera(self):
        rng = np.random.default_rng(31)
        cams = camera_ring(5)
        pos = np.array([0.4, -0.2, 0.3])
        r_world = 0.85
        obs = [mv.Observation(c.id, tuple(project(c, pos)),
                              radius_px_for(c, pos, r_world)) for c in cams]
        kp = mv.Keypoint3D("k", pos, observations=obs)
        est = mv.estimate_thickness(kp, cams)
        assert est == pytest.approx(r_world, rel=1e-6)

    def test_average_of_two(self):
        # craft per-camera pixel radii whose individual estimates are 10 and 14
        c0 = looking_at_camera("c0", (0, 0, -5), (0, 0, 1))
        c1 = looking_at_camera("c1", (0, 0, 20), (0, 0, -1))
        pos = np.array([0.0, 0.0, 0.0])
        obs = [
            mv.Observation("c0", tuple(project(c0, pos)), radius_px_for(c0, pos, 10.0)),
            mv.Observation("c1", tuple(project(c1, pos)), radius_px_for(c1, pos, 14.0)),
        ]
        kp = mv.Keypoint3D("k", pos, observations=obs)
        assert mv.estimate_thickness(kp, [c0, c1]) == pytest.approx(12.0, rel=1e-9)

    def test_misaligned_ignored(self):
        good = looking_at_camera("g", (0, 0, -5), (0, 0, 1))
        bad = looking_at_camera("b", (0, 0, 9), (0, 0, -1), aligned=False)
        pos = np.zeros(3)
        obs = [
            mv.Observation("g", tuple(project(good, pos)), radius_px_for(good, pos, 2.0)),
            mv.Observation("b", tuple(project(bad, pos)), 999.0),
        ]
        kp = mv.Keypoint3D("k", pos, observations=obs)
        assert mv.estimate_thickness(kp, [good, bad]) == pytest.approx(2.0, rel=1e-9)

    def test_no_observations(self):
        kp = mv.Keypoint3D("k", np.zeros(3))
        with pytest.raises(NoObservations):
            mv.estimate_thickness(kp, [])

    def test_estimate_all_radii(self):
        cams = camera_ring(3)
        pos = np.array([0.1, 0.2, 0.0])
        obs = [mv.Observation(c.id, tuple(project(c, pos)),
                              radius_px_for(c, pos, 0.5)) for c in cams]
        kps = [mv.Keypoint3D("ka", pos, observations=obs),
               mv.Keypoint3D("kb", pos)]
        report = mv.estimate_all_radii(kps, cams)
        assert kps[0].radius == pytest.approx(0.5, rel=1e-6)
        assert kps[1].radius is None
        assert [r["keypoint"] for r in report] == ["kb"]


# -------------------------------------------------- clamp_narrow_baseline

def narrow_baseline_scene():
    """Two cameras 0.05 apart at z=0 viewing a chain near z=10."""
    cams = [
        looking_at_camera("n0", (-0.025, 0.0, 0.0), (0.0, 0.0, 10.0)),
        looking_at_camera("n1", (0.025, 0.0, 0.0), (0.0, 0.0, 10.0)),
    ]
    chain = [
        np.array([0.0, 0.0, 10.0]),
        np.array([0.3, 0.1, 10.5]),
        np.array([0.5, 0.35, 11.2]),
        np.array([0.4, 0.7, 11.8]),
    ]
    vertices = []
    for i, pos in enumerate(chain):
        obs = [mv.Observation(c.id, tuple(project(c, pos))) for c in cams]
        vertices.append(mv.BranchVertex(i, pos.copy(), 0.05, f"k{i}", obs))
    edges = [(0, 1), (1, 2), (2, 3)]
    return cams, mv.Branch3D(vertices, edges, roots=[0]), chain


class TestClampNarrowBaseline:
    def test_alpha_one_identity(self):
        cams, branch, chain = narrow_baseline_scene()
        out = mv.clamp_narrow_baseline(branch, 0, [], cams, alpha=1.0)
        for v, orig in zip(out.vertices, chain):
            assert np.array_equal(v.position, orig)

    def test_alpha_zero_single_camera_flattens(self):
        cams, branch, chain = narrow_baseline_scene()
        solo = [cams[0]]
        for v in branch.vertices:
            v.observations = [o for o in v.observations if o.camera_id == "n0"]
        out = mv.clamp_narrow_baseline(branch, 0, [], solo, alpha=0.0)
        axis = solo[0].view_axis
        root_depth = float(axis @ (chain[0] - solo[0].center))
        for v in out.vertices:
            depth = float(axis @ (v.position - solo[0].center))
            assert depth == pytest.approx(root_depth, abs=1e-9)

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 0.9])
    def test_reprojection_preserved(self, alpha):
        cams, branch, chain = narrow_baseline_scene()
        out = mv.clamp_narrow_baseline(branch, 0, [], cams, alpha=alpha)
        vm = {v.id: v for v in branch.vertices}
        for v in out.vertices:
            for ob in vm[v.id].observations:
                cam = cams[0] if ob.camera_id == "n0" else cams[1]
                px = project(cam, v.position)
                assert np.linalg.norm(px - np.asarray(ob.pixel)) <= 0.5

    def test_alpha_zero_moves_depth(self):
        cams, branch, chain = narrow_baseline_scene()
        out = mv.clamp_narrow_baseline(branch, 0, [], cams, alpha=0.0)
        moved = [np.linalg.norm(v.position - chain[i])
                 for i, v in enumerate(out.vertices)]
        assert moved[0] == 0.0
        assert max(moved[1:]) > 0.1  # depths genuinely pulled to the parent

    def test_cycle_detected(self):
        cams, branch, chain = narrow_baseline_scene()
        branch.edges.append((3, 0))
        with pytest.raises(CycleDetected):
            mv.clamp_narrow_baseline(branch, 0, [], cams, alpha=0.5)

    def test_bad_alpha(self):
        cams, branch, _ = narrow_baseline_scene()
        with pytest.raises(InvalidParams):
            mv.clamp_narrow_baseline(branch, 0, [], cams, alpha=1.5)

    def test_annotations_refresh_keypoint_pixels(self):
        cams, branch, chain = narrow_baseline_scene()
        anns = []
        for cam in cams:
            vertices = [AnnotationVertex(i, *project(cam, chain[i]), 3.0,
                                         keypoint=f"k{i}")
                        for i in range(len(chain))]
            anns.append(ImageAnnotation(f"img_{cam.id}", cam.id, 640, 480,
                                        vertices, [(0, 1), (1, 2), (2, 3)]))
        for v in branch.vertices:
            v.observations = []  # force the annotation path
        out = mv.clamp_narrow_baseline(branch, 0, anns, cams, alpha=0.5)
        assert np.linalg.norm(out.vertices[1].position - chain[1]) > 1e-6


# -------------------------------------------------- reregister_misaligned

class TestReregisterMisaligned:
    def scene(self, rng, noise=0.0):
        cams = camera_ring(8, radius=9.0)
        points = {f"k{i:02d}": rng.uniform(-1.5, 1.5, 3) for i in range(14)}
        anns = []
        for cam in cams:
            vertices = []
            for j, kp in enumerate(sorted(points)):
                px = project(cam, points[kp]) + rng.normal(0, noise, 2)
                vertices.append(AnnotationVertex(j, float(px[0]), float(px[1]),
                                                 3.0, keypoint=kp))
            anns.append(ImageAnnotation(f"img_{cam.id}", cam.id, 640, 480,
                                        vertices, []))
        return cams, points, anns

    def scramble(self, cam, rng):
        R = random_rotation(rng)
        return Camera(cam.id, cam.intrinsics,
                      Extrinsics(R, rng.uniform(-2, 2, 3)), aligned=False)

    def test_recovers_scrambled_camera(self):
        rng = np.random.default_rng(41)
        cams, points, anns = self.scene(rng)
        true_cam3 = cams[3]
        cams[3] = self.scramble(cams[3], rng)
        first, _ = mv.triangulate_keypoints(anns, cams)
        new_cams, second, report = mv.reregister_misaligned(first, anns, cams)
        rec = new_cams[true_cam3.id]
        assert rec.aligned
        assert np.max(np.abs(rec.extrinsics.R - true_cam3.extrinsics.R)) < 1e-4
        assert np.max(np.abs(rec.extrinsics.t - true_cam3.extrinsics.t)) < 1e-4
        assert any(r["kind"] == "realigned" for r in report)
        err = np.mean([np.linalg.norm(k.position - points[k.id]) for k in second])
        assert err < 1e-6

    def test_noisy_second_pass_improves(self):
        rng = np.random.default_rng(43)
        cams, points, anns = self.scene(rng, noise=0.3)
        cams[5] = self.scramble(cams[5], rng)
        first, _ = mv.triangulate_keypoints(anns, cams)
        rms_first = np.sqrt(np.mean([
            np.linalg.norm(k.position - points[k.id]) ** 2 for k in first]))
        _, second, _ = mv.reregister_misaligned(first, anns, cams)
        rms_second = np.sqrt(np.mean([
            np.linalg.norm(k.position - points[k.id]) ** 2 for k in second]))
        assert rms_second < rms_first

    def test_too_few_shared_excluded(self):
        rng = np.random.default_rng(47)
        cams, points, anns = self.scene(rng)
        cams[2] = self.scramble(cams[2], rng)
        # keep only 3 labeled vertices in the misaligned image
        ann = anns[2]
        anns[2] = ImageAnnotation(ann.image_id, ann.camera_id, ann.width,
                                  ann.height, ann.vertices[:3], [])
        first, _ = mv.triangulate_keypoints(anns, cams)
        new_cams, second, report = mv.reregister_misaligned(first, anns, cams)
        assert not new_cams[cams[2].id].aligned
        assert any(r["kind"] == "excluded-misaligned" for r in report)

    def test_no_misaligned_is_identity(self):
        rng = np.random.default_rng(53)
        cams, points, anns = self.scene(rng)
        first, _ = mv.triangulate_keypoints(anns, cams)
        new_cams, second, report = mv.reregister_misaligned(first, anns, cams)
        assert second is first
        assert report == []
