"""Lifting image annotations into 3D branch geometry.

Keypoints labeled across calibrated views are triangulated by least squares,
branch topology is transferred from the per-image annotation graphs, curves
are subdivided at matching fractional arc lengths, cross-sectional radii come
from similar triangles, and chains seen from near-parallel views can be
depth-clamped toward their parents without disturbing their reprojections.
"""
from __future__ import annotations

from collections import deque
import json

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, parallel_plane_intersect, pixel_ray, solve_pnp
from .errors import (
    CycleDetected,
    DegenerateConfiguration,
    DegenerateRays,
    InvalidParams,
    NoConvergence,
    NoObservations,
    RayParallelToPlane,
)

# relative eigenvalue floor below which a ray bundle cannot pin down a point
RAY_CONDITION_EPS = 1e-8
# observing directions spanning less than this are flagged, not rejected
VIEW_DIVERSITY_DEG = 10.0
MIN_PNP_KEYPOINTS = 6


@dataclass(frozen=True)
class Observation:
    """One image-space sighting of a 3D point."""

    camera_id: str
    pixel: tuple
    radius_px: float | None = None


@dataclass
class Keypoint3D:
    """A labeled point lifted to world space."""

    id: str
    position: np.ndarray
    radius: float | None = None
    observations: list = field(default_factory=list)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)


@dataclass
class BranchVertex:
    """Vertex of a 3D branch graph.

    thickness is the cross-sectional radius in world units. keypoint is the
    source keypoint id for triangulated vertices and None for vertices
    introduced by subdivision.
    """

    id: int
    position: np.ndarray
    thickness: float | None = None
    keypoint: str | None = None
    observations: list = field(default_factory=list)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)


@dataclass
class Branch3D:
    vertices: list
    edges: list
    roots: list = field(default_factory=list)

    def vertex_map(self) -> dict:
        return {v.id: v for v in self.vertices}

    def adjacency(self) -> dict:
        adj = {v.id: [] for v in self.vertices}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return adj


def _camera_map(cameras) -> dict:
    if isinstance(cameras, dict):
        return cameras
    return {c.id: c for c in cameras}


def triangulate_point(rays) -> tuple[np.ndarray, float]:
    """Least-squares point for a bundle of rays.

    Minimizes the sum of squared point-to-ray distances; the normal equations
    are (sum_i I - d_i d_i^T) x = sum_i (I - d_i d_i^T) o_i. Returns the
    minimizer and the rms point-to-ray distance. Raises DegenerateRays when
    the bundle is (near-)parallel: smallest/largest eigenvalue of the system
    matrix below RAY_CONDITION_EPS.
    """
    rays = list(rays)
    if len(rays) < 2:
        raise DegenerateRays("need at least two rays")
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for ray in rays:
        d = ray.direction
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ ray.origin
    w = np.linalg.eigvalsh(A)
    if w[0] < RAY_CONDITION_EPS * w[-1]:
        raise DegenerateRays(
            f"ray bundle is near-parallel (eigenvalue ratio {w[0] / w[-1]:.2e})"
        )
    x = np.linalg.solve(A, b)
    # distance via the perpendicular component; the expanded scalar form
    # v.v - (v.d)^2 cancels catastrophically when the rays nearly intersect
    sq = []
    for ray in rays:
        v = x - ray.origin
        perp = v - (v @ ray.direction) * ray.direction
        sq.append(float(perp @ perp))
    return x, float(np.sqrt(np.mean(sq)))


def triangulate_keypoints(annotations, cameras) -> tuple[list, list]:
    """One Keypoint3D per keypoint id seen from >= 2 aligned cameras.

    Observations from misaligned cameras are kept on the keypoint but take no
    part in triangulation. Returns (keypoints, report); skipped keypoints and
    low-viewpoint-diversity warnings land in the report.
    """
    cams = _camera_map(cameras)
    sightings: dict = {}
    for ann in annotations:
        for v in ann.vertices:
            if v.keypoint is None:
                continue
            sightings.setdefault(v.keypoint, []).append(
                Observation(ann.camera_id, (float(v.x), float(v.y)), float(v.thickness))
            )
    keypoints, report = [], []
    for kp_id in sorted(sightings):
        obs = sightings[kp_id]
        usable = [
            o for o in obs
            if o.camera_id in cams and cams[o.camera_id].aligned
        ]
        if len(usable) < 2:
            report.append({
                "kind": "skipped-keypoint",
                "keypoint": kp_id,
                "detail": f"{len(usable)} aligned observation(s), need 2",
            })
            continue
        rays = [pixel_ray(cams[o.camera_id], o.pixel) for o in usable]
        try:
            pos, rms = triangulate_point(rays)
        except DegenerateRays as exc:
            report.append({
                "kind": "skipped-keypoint",
                "keypoint": kp_id,
                "detail": str(exc),
            })
            continue
        spread = _max_pairwise_angle_deg([r.direction for r in rays])
        if spread < VIEW_DIVERSITY_DEG:
            report.append({
                "kind": "low-viewpoint-diversity",
                "keypoint": kp_id,
                "detail": f"observing directions span {spread:.2f} deg",
            })
        keypoints.append(Keypoint3D(kp_id, pos, None, obs))
    return keypoints, report


def _max_pairwise_angle_deg(directions) -> float:
    worst = 0.0
    for i in range(len(directions)):
        for j in range(i + 1, len(directions)):
            c = abs(float(directions[i] @ directions[j]))
            worst = max(worst, np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    return worst


def _keypoint_paths(ann) -> list:
    """Curves between keypoints in one annotation.

    Returns (kp_a, kp_b, vertex id path) triples, one per keypoint pair. A
    curve is a path whose interior vertices are degree-2 non-keypoints; walks
    that dead-end or hit an unlabeled junction yield nothing.
    """
    vm = ann.vertex_map()
    adj = ann.adjacency()
    seen = set()
    out = []
    limit = len(ann.vertices) + 1
    for v in ann.vertices:
        if v.keypoint is None:
            continue
        for nb in adj.get(v.id, []):
            path = [v.id]
            prev, cur = v.id, nb
            while len(path) <= limit:
                path.append(cur)
                cv = vm[cur]
                if cv.keypoint is not None:
                    if cv.keypoint != v.keypoint:
                        key = frozenset((v.keypoint, cv.keypoint))
                        if key not in seen:
                            seen.add(key)
                            out.append((v.keypoint, cv.keypoint, path))
                    break
                nbs = adj[cur]
                if len(nbs) != 2:
                    break
                nxt = nbs[0] if nbs[1] == prev else nbs[1]
                prev, cur = cur, nxt
    return out


def transfer_topology(annotations, keypoints) -> Branch3D:
    """Union of keypoint-pair curves over all annotations, as 3D edges.

    Vertices are the triangulated keypoints (integer ids assigned in sorted
    keypoint order); an edge appears once no matter how many images contain
    the corresponding curve, so the operation is idempotent.
    """
    ordered = sorted(keypoints, key=lambda k: k.id)
    vid = {k.id: i for i, k in enumerate(ordered)}
    edges = set()
    for ann in annotations:
        for a, b, _ in _keypoint_paths(ann):
            if a in vid and b in vid:
                i, j = vid[a], vid[b]
                edges.add((min(i, j), max(i, j)))
    vertices = [
        BranchVertex(vid[k.id], k.position.copy(), k.radius, k.id,
                     list(k.observations))
        for k in ordered
    ]
    return Branch3D(vertices, sorted(edges))


def validate_branch(branch: Branch3D) -> list:
    """Structural warnings: isolated vertices, components with no keypoint."""
    report = []
    adj = branch.adjacency()
    for v in branch.vertices:
        if not adj[v.id]:
            report.append({
                "kind": "isolated-vertex",
                "vertex": v.id,
                "detail": "no curve connects this keypoint to any other",
            })
    seen: set = set()
    for v in branch.vertices:
        if v.id in seen:
            continue
        comp, queue = [], deque([v.id])
        seen.add(v.id)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        vm = branch.vertex_map()
        if not any(vm[u].keypoint is not None for u in comp):
            report.append({
                "kind": "component-without-keypoint",
                "vertex": comp[0],
                "detail": f"component of {len(comp)} vertices has no keypoint",
            })
    return report


def _fractional_point(xy: np.ndarray, f: float) -> np.ndarray:
    """Point at fraction f of the polyline's Euclidean arc length."""
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return xy[0].astype(float)
    t = f * s[-1]
    return np.array([np.interp(t, s, xy[:, 0]), np.interp(t, s, xy[:, 1])])


def subdivide_curves(branch: Branch3D, annotations, cameras, n_sub: int):
    """Insert n_sub evenly spaced vertices along every edge.

    Each new vertex at fraction f is triangulated from the f-arc-length
    points of the corresponding image-space curves; edges visible in fewer
    than two aligned images (or with a degenerate bundle) fall back to linear
    interpolation of the endpoints. Returns (branch, report).
    """
    if n_sub < 0:
        raise InvalidParams("n_sub must be >= 0")
    if n_sub == 0:
        return branch, []
    cams = _camera_map(cameras)
    vm = branch.vertex_map()
    kp_vid = {v.keypoint: v.id for v in branch.vertices if v.keypoint is not None}

    # oriented pixel polylines per vertex-id pair, one per annotation
    curves: dict = {}
    for ann in annotations:
        cam = cams.get(ann.camera_id)
        if cam is None or not cam.aligned:
            continue
        avm = ann.vertex_map()
        for a, b, path in _keypoint_paths(ann):
            if a not in kp_vid or b not in kp_vid:
                continue
            xy = np.array([[avm[i].x, avm[i].y] for i in path], dtype=float)
            i, j = kp_vid[a], kp_vid[b]
            if i > j:
                i, j = j, i
                xy = xy[::-1]
            curves.setdefault((i, j), []).append((ann.camera_id, xy))

    new_vertices = list(branch.vertices)
    new_edges = []
    report = []
    next_id = max((v.id for v in branch.vertices), default=-1) + 1
    for a, b in branch.edges:
        va, vb = vm[a], vm[b]
        key = (min(a, b), max(a, b))
        plist = curves.get(key, [])
        chain = [a]
        for k in range(1, n_sub + 1):
            f = k / (n_sub + 1)
            f_stored = f if a == key[0] else 1.0 - f
            samples = [
                (cid, _fractional_point(xy, f_stored)) for cid, xy in plist
            ]
            obs = [Observation(cid, (float(px[0]), float(px[1]))) for cid, px in samples]
            pos = None
            if len(samples) >= 2:
                rays = [pixel_ray(cams[cid], px) for cid, px in samples]
                try:
                    pos, _ = triangulate_point(rays)
                except DegenerateRays:
                    pos = None
            if pos is None:
                pos = (1.0 - f) * va.position + f * vb.position
                report.append({
                    "kind": "subdivision-fallback",
                    "edge": [a, b],
                    "detail": f"fraction {f:.4f}: {len(samples)} usable view(s)",
                })
            thick = None
            if va.thickness is not None and vb.thickness is not None:
                thick = (1.0 - f) * va.thickness + f * vb.thickness
            new_vertices.append(BranchVertex(next_id, pos, thick, None, obs))
            chain.append(next_id)
            next_id += 1
        chain.append(b)
        new_edges.extend(zip(chain[:-1], chain[1:]))
    return Branch3D(new_vertices, new_edges, list(branch.roots)), report


def estimate_thickness(kp: Keypoint3D, cameras) -> float:
    """World-space radius of a keypoint from its annotated pixel radii.

    Per observing camera: embed the annotated point on the plane at unit
    camera depth, intersect its ray with the plane through the keypoint
    parallel to the image plane, and scale the annotated radius (converted to
    unit-depth units via the mean focal length) by the ratio of the two
    point-to-center distances. The estimates are averaged over cameras.
    """
    cams = _camera_map(cameras)
    estimates = []
    for ob in kp.observations:
        cam = cams.get(ob.camera_id)
        if cam is None or not cam.aligned or ob.radius_px is None:
            continue
        intr = cam.intrinsics
        xn = np.array([
            (ob.pixel[0] - intr.cx) / intr.fx,
            (ob.pixel[1] - intr.cy) / intr.fy,
            1.0,
        ])
        ray = pixel_ray(cam, ob.pixel)
        try:
            x_wp = parallel_plane_intersect(cam, ray, kp.position)
        except RayParallelToPlane:
            continue
        dist_world = float(np.linalg.norm(x_wp - cam.center))
        dist_image = float(np.linalg.norm(xn))
        f_bar = (intr.fx + intr.fy) / 2.0
        estimates.append((dist_world / dist_image) * (ob.radius_px / f_bar))
    if not estimates:
        raise NoObservations(f"keypoint {kp.id}: no aligned observation with a radius")
    return float(np.mean(estimates))


def estimate_all_radii(keypoints, cameras) -> list:
    """Fill kp.radius for every keypoint; unmeasurable ones are reported."""
    report = []
    for kp in keypoints:
        try:
            kp.radius = estimate_thickness(kp, cameras)
        except NoObservations as exc:
            report.append({
                "kind": "no-radius",
                "keypoint": kp.id,
                "detail": str(exc),
            })
    return report


def clamp_narrow_baseline(branch: Branch3D, root_id: int, annotations, cameras,
                          alpha: float = 0.9) -> Branch3D:
    """Pull child depths toward their parents without moving reprojections.

    Breadth-first from the root: for each child and each observing camera,
    intersect the child's annotation ray with the plane through the (already
    clamped) parent parallel to that camera's image plane, blend the
    intersection with the original position by alpha, and average the
    per-camera results. alpha=1 leaves the branch untouched; alpha=0 flattens
    every child onto its parent's per-camera depth planes.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParams("alpha must be in [0, 1]")
    cams = _camera_map(cameras)
    vm = branch.vertex_map()
    if root_id not in vm:
        raise InvalidParams(f"root vertex {root_id} not in branch")
    adj = branch.adjacency()

    # pixels from the annotations take precedence for keypoint vertices
    kp_obs: dict = {}
    for ann in annotations or []:
        for v in ann.vertices:
            if v.keypoint is not None:
                kp_obs.setdefault(v.keypoint, []).append(
                    Observation(ann.camera_id, (float(v.x), float(v.y)), float(v.thickness))
                )

    new_pos = {root_id: vm[root_id].position.copy()}
    parent = {root_id: None}
    queue = deque([root_id])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w == parent[u]:
                continue
            if w in parent:
                raise CycleDetected(f"vertex {w} reachable by two paths from the root")
            parent[w] = u
            v = vm[w]
            if alpha == 1.0:
                new_pos[w] = v.position.copy()
                queue.append(w)
                continue
            obs = v.observations
            if v.keypoint is not None and v.keypoint in kp_obs:
                obs = kp_obs[v.keypoint]
            candidates = []
            for ob in obs:
                cam = cams.get(ob.camera_id)
                if cam is None or not cam.aligned:
                    continue
                ray = pixel_ray(cam, ob.pixel)
                try:
                    c_xp = parallel_plane_intersect(cam, ray, new_pos[u])
                except RayParallelToPlane:
                    continue
                candidates.append(c_xp + alpha * (v.position - c_xp))
            new_pos[w] = (
                np.mean(candidates, axis=0) if candidates else v.position.copy()
            )
            queue.append(w)

    vertices = [
        BranchVertex(v.id, new_pos.get(v.id, v.position).copy(), v.thickness,
                     v.keypoint, list(v.observations))
        for v in branch.vertices
    ]
    return Branch3D(vertices, list(branch.edges), list(branch.roots))


def reregister_misaligned(keypoints, annotations, cameras,
                          min_shared: int = MIN_PNP_KEYPOINTS):
    """Recover extrinsics for misaligned cameras from first-pass keypoints.

    Each misaligned camera sharing >= min_shared keypoints with the first
    pass gets a fresh pose from solve_pnp and is marked aligned; the
    keypoints are then re-triangulated with the enlarged camera set. With no
    misaligned cameras the inputs are returned untouched. Returns
    (cameras, keypoints, report).
    """
    cams = dict(_camera_map(cameras))
    kp_pos = {k.id: k.position for k in keypoints}
    misaligned = [
        ann for ann in annotations
        if ann.camera_id in cams and not cams[ann.camera_id].aligned
    ]
    if not misaligned:
        return cams, keypoints, []
    report = []
    for ann in misaligned:
        cam = cams[ann.camera_id]
        shared = [
            (kp_pos[v.keypoint], (float(v.x), float(v.y)))
            for v in ann.vertices
            if v.keypoint is not None and v.keypoint in kp_pos
        ]
        if len(shared) < min_shared:
            report.append({
                "kind": "excluded-misaligned",
                "camera": ann.camera_id,
                "detail": f"{len(shared)} shared keypoint(s) < {min_shared}",
            })
            continue
        try:
            res = solve_pnp(shared, cam.intrinsics)
        except (DegenerateConfiguration, NoConvergence) as exc:
            report.append({
                "kind": "pnp-failed",
                "camera": ann.camera_id,
                "detail": str(exc),
            })
            continue
        cams[ann.camera_id] = Camera(cam.id, cam.intrinsics, res.extrinsics,
                                     aligned=True)
        report.append({
            "kind": "realigned",
            "camera": ann.camera_id,
            "detail": f"pnp rms {res.rms_px:.4f} px over {len(shared)} keypoints",
        })
    new_kps, tri_report = triangulate_keypoints(annotations, cams)
    return cams, new_kps, report + tri_report


# -- json ----------------------------------------------------------------------

def branch_to_dict(branch: Branch3D) -> dict:
    return {
        "vertices": [
            {
                "id": v.id,
                "position": [float(x) for x in v.position],
                "thickness": None if v.thickness is None else float(v.thickness),
                "keypoint": v.keypoint,
                "observations": [
                    {"camera_id": ob.camera_id,
                     "pixel": [float(ob.pixel[0]), float(ob.pixel[1])],
                     "radius_px": None if ob.radius_px is None else float(ob.radius_px)}
                    for ob in v.observations
                ],
            }
            for v in branch.vertices
        ],
        "edges": [[int(a), int(b)] for a, b in branch.edges],
        "roots": [int(r) for r in branch.roots],
    }


def branch_from_dict(data: dict) -> Branch3D:
    vertices = []
    for v in data["vertices"]:
        obs = [
            Observation(str(ob["camera_id"]),
                        (float(ob["pixel"][0]), float(ob["pixel"][1])),
                        None if ob.get("radius_px") is None else float(ob["radius_px"]))
            for ob in v.get("observations", [])
        ]
        thickness = v.get("thickness")
        vertices.append(BranchVertex(
            int(v["id"]), np.array(v["position"], dtype=float),
            None if thickness is None else float(thickness),
            v.get("keypoint"), obs))
    edges = [(int(a), int(b)) for a, b in data["edges"]]
    roots = [int(r) for r in data.get("roots", [])]
    return Branch3D(vertices, edges, roots=roots)


def write_branches(branch: Branch3D, path) -> None:
    with open(path, "w") as f:
        json.dump(branch_to_dict(branch), f, indent=2)


def read_branches(path) -> Branch3D:
    with open(path) as f:
        return branch_from_dict(json.load(f))
