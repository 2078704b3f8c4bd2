"""Generate the bundled synthetic fixture: a small Y-shaped tree seen by a
six-camera ring, with annotations, rendered images, a surface point cloud,
and a lagged video pair. Deterministic; safe to rerun.

Usage: python3 scripts/make_fixture.py [out_dir]
"""

import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

import arbor.skeleton as sk
import arbor.skinning as skin
from arbor.annotation import (AnnotationVertex, ImageAnnotation,
                              rasterize_mask, validate, write_annotation)
from arbor.camera import Camera, Extrinsics, Intrinsics, project, write_cameras
from arbor.multiview import Branch3D, BranchVertex
from arbor.pointcloud import PointCloud, write_ply

WIDTH, HEIGHT = 768, 576
FOCAL = 800.0
RING_RADIUS = 8.0
RING_HEIGHT = 1.5
VIDEO_LAG = 3

# ground-truth tree: keypoints with world positions and radii
KEYPOINTS = {
    "base": ((0.00, 1.20, 0.00), 0.032),
    "mid": ((0.05, 0.30, 0.02), 0.028),
    "fork": ((0.10, -0.40, 0.05), 0.024),
    "tip-a": ((0.70, -1.10, 0.30), 0.020),
    "tip-b": ((-0.50, -1.20, -0.25), 0.020),
}
# curves between keypoints; bow displaces the midpoint sideways
CURVES = [
    ("base", "mid", (0.030, 0.0, 0.020)),
    ("mid", "fork", (-0.025, 0.0, 0.015)),
    ("fork", "tip-a", (0.0, 0.0, 0.060)),
    ("fork", "tip-b", (0.0, 0.0, -0.050)),
]
INTERIOR_PER_CURVE = 3


def ring_camera(index, count=6):
    a = 2.0 * np.pi * index / count
    position = np.array([RING_RADIUS * np.cos(a), RING_HEIGHT,
                         RING_RADIUS * np.sin(a)])
    z = -position / np.linalg.norm(position)
    down = np.array([0.0, 1.0, 0.0])
    y = down - (down @ z) * z
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.stack([x, y, z])
    intr = Intrinsics(fx=FOCAL, fy=FOCAL, cx=WIDTH / 2, cy=HEIGHT / 2,
                      width=WIDTH, height=HEIGHT)
    return Camera(f"cam{index}", intr, Extrinsics(R, -R @ position))


def curve_points(a, b, bow):
    """Quadratic bow between two keypoints, radii linear along it."""
    pa, ra = np.array(KEYPOINTS[a][0]), KEYPOINTS[a][1]
    pb, rb = np.array(KEYPOINTS[b][0]), KEYPOINTS[b][1]
    bow = np.array(bow)
    ts = np.linspace(0.0, 1.0, INTERIOR_PER_CURVE + 2)
    pts = [(1 - t) * pa + t * pb + np.sin(np.pi * t) * bow for t in ts]
    radii = [(1 - t) * ra + t * rb for t in ts]
    return ts, pts, radii


def ground_truth_branch():
    """The full tree as a lifted branch graph with dense curve vertices."""
    vertices = []
    ids = {}
    edges = []

    def vertex_id(key, position, radius, keypoint=None):
        if key not in ids:
            ids[key] = len(vertices)
            vertices.append(BranchVertex(ids[key], np.array(position),
                                         float(radius), keypoint))
        return ids[key]

    for name, (pos, r) in KEYPOINTS.items():
        vertex_id(name, pos, r, keypoint=name)
    for a, b, bow in CURVES:
        ts, pts, radii = curve_points(a, b, bow)
        prev = ids[a]
        for k in range(1, len(ts) - 1):
            v = vertex_id((a, b, k), pts[k], radii[k])
            edges.append((prev, v))
            prev = v
        edges.append((prev, ids[b]))
    return Branch3D(vertices, edges, roots=[ids["base"]])


def annotate_camera(cam, branch):
    mean_focal = 0.5 * (cam.intrinsics.fx + cam.intrinsics.fy)
    vertices = []
    for v in branch.vertices:
        px = project(cam, v.position)
        depth = float(cam.world_to_cam(v.position)[2])
        vertices.append(AnnotationVertex(
            v.id, float(px[0]), float(px[1]),
            float(v.thickness * mean_focal / depth), v.keypoint))
    ann = ImageAnnotation(cam.id, cam.id, WIDTH, HEIGHT, vertices,
                          list(branch.edges))
    violations = validate(ann)
    if violations:
        raise SystemExit(f"fixture annotation invalid for {cam.id}: "
                         + "; ".join(str(x) for x in violations))
    return ann


def render_image(mask):
    """Flat-lit render: dark bark on a light background."""
    img = np.where(mask[..., None] > 0,
                   np.array([72, 52, 38], dtype=np.uint8),
                   np.array([214, 218, 209], dtype=np.uint8))
    return img


def surface_cloud(branch, seed=0):
    skel = sk.skeleton_from_branches(branch, samples_per_segment=4)
    mesh = skin.skin_skeleton(skel, ring_sides=12)
    normals = mesh.normals / np.linalg.norm(mesh.normals, axis=1,
                                            keepdims=True)
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(0.0, 0.01, size=(len(mesh.vertices), 1))
    points = mesh.vertices + (0.008 + jitter) * normals
    y = points[:, 1]
    shade = (y.max() - y) / max(y.max() - y.min(), 1e-9)
    colors = np.stack([0.32 + 0.12 * shade,
                       0.20 + 0.06 * shade,
                       0.12 + 0.02 * shade], axis=1)
    return PointCloud(points=points, colors=colors)


def video_pair():
    """Master clip: a bright block drifting over a gradient; two windows
    of it LAG frames apart."""
    frames = []
    size, block = 48, 6
    base = np.linspace(0.1, 0.3, size)[None, :] * np.ones((size, 1))
    total = 24 + VIDEO_LAG
    for t in range(total):
        f = base.copy()
        x = 4 + t
        y = 6 + (t * 3) // 4
        f[y:y + block, x:x + block] = 0.95
        frames.append(f)
    master = np.stack(frames).astype(np.float32)
    feed_a = master[VIDEO_LAG:]
    feed_b = master[:-VIDEO_LAG]
    return feed_a, feed_b


def main(out_dir):
    out = Path(out_dir)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    (out / "videos").mkdir(exist_ok=True)

    cameras = [ring_camera(i) for i in range(6)]
    write_cameras(cameras, out / "cameras.json")

    branch = ground_truth_branch()
    for cam in cameras:
        ann = annotate_camera(cam, branch)
        write_annotation(ann, out / "annotations" / f"{cam.id}.json")
        mask = rasterize_mask(ann)
        Image.fromarray(render_image(mask)).save(
            out / "images" / f"{cam.id}.png")

    write_ply(surface_cloud(branch), out / "cloud.ply")

    feed_a, feed_b = video_pair()
    np.save(out / "videos" / "feed_a.npy", feed_a)
    np.save(out / "videos" / "feed_b.npy", feed_b)

    config = {
        "paths": {
            "cameras": "cameras.json",
            "annotations": "annotations",
            "images": "images",
            "cloud": "cloud.ply",
            "videos": ["videos/feed_a.npy", "videos/feed_b.npy"],
            "output": "out",
        },
        "flow": {"r": 4.0, "sigma": 1.8, "N": 35,
                 "scales": [1.0],
                 "threshold": 0.25},
        "trace": {"step": 2.0, "max_steps": 500},
        "sync": {"max_lag": 10},
        "dataset": {"count": 2, "seed": 0},
        "root_keypoint": "base",
        "subdivisions": 2,
        "clamp_alpha": 0.9,
        "skinning": {"ring_sides": 12, "samples_per_segment": 4},
        "displacement": {"sample_radius": 0.02, "sample_height": 0.03,
                         "smooth_iterations": 1, "smooth_lambda": 0.5},
        "density": 600.0,
        "joint_stiffness": 40.0,
        "joint_damping": 0.8,
        "seed": 0,
    }
    with open(out / "config.json", "w") as f:
        json.dump(config, f, indent=2)
    print(f"fixture written to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "fixtures/synthetic")
