"""Point-cloud driven displacement of mesh vertices along their normals.

Each vertex samples the cloud inside a cylinder aligned with its normal
(essentially a local 2D height field over the surface); the mean offset of
the enclosed points becomes a Dirichlet height, and vertices whose cylinders
catch nothing get harmonic values by solving Laplace's equation on the mesh
graph. Plain Laplacian smoothing lives here too since it shares the graph.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import lil_matrix
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .errors import InvalidParams, NoConvergence
from .pointcloud import PointCloud
from .skinning import SkinnedMesh

FILL_RESIDUAL = 1e-8


def cylinder_contains(point, center, axis, radius, height) -> bool:
    """Closed membership test: boundary points count as inside."""
    d = np.asarray(point, dtype=float) - center
    along = float(d @ axis)
    if abs(along) > height:
        return False
    radial = d - along * axis
    return float(radial @ radial) <= radius * radius


def sample_heights(mesh: SkinnedMesh, cloud: PointCloud, sample_radius: float,
                   sample_height: float):
    """Per-vertex mean normal offset of cloud points in the sampling cylinder.

    Returns (heights, known) where known marks vertices whose cylinder
    enclosed at least one point. Membership is closed on the boundary.
    """
    if sample_radius <= 0 or sample_height <= 0:
        raise InvalidParams("sampling cylinder must have positive extent")
    cloud.require_nonempty()
    tree = cKDTree(cloud.points)
    reach = float(np.hypot(sample_radius, sample_height))
    heights = np.zeros(len(mesh.vertices))
    known = np.zeros(len(mesh.vertices), dtype=bool)
    for i, (v, n) in enumerate(zip(mesh.vertices, mesh.normals)):
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            continue
        axis = n / nn
        idx = tree.query_ball_point(v, reach)
        if not idx:
            continue
        d = cloud.points[idx] - v
        along = d @ axis
        # same arithmetic as cylinder_contains so the closed boundary rule
        # matches a brute-force membership check bit for bit
        radial = d - along[:, None] * axis
        radial_sq = np.einsum("ij,ij->i", radial, radial)
        inside = (np.abs(along) <= sample_height) & (
            radial_sq <= sample_radius * sample_radius
        )
        if not inside.any():
            continue
        mean = cloud.points[idx][inside].mean(axis=0)
        heights[i] = float((mean - v) @ axis)
        known[i] = True
    return heights, known


def laplace_fill(adjacency, heights, known):
    """Harmonic extension of known heights over a vertex graph.

    Unknown vertices satisfy h(v) = mean of neighbor h (uniform graph
    Laplacian) with the known heights as Dirichlet data, solved directly and
    checked to relative residual <= 1e-8. Unknown regions with no known
    contact anywhere (isolated vertices included) are set to 0 and reported.
    """
    heights = np.asarray(heights, dtype=float).copy()
    known = np.asarray(known, dtype=bool)
    n = len(heights)
    report = []
    unknown = np.flatnonzero(~known)
    if len(unknown) == 0:
        return heights, report

    # connected components of the unknown subgraph; drop the unreachable ones
    comp = {}
    untouched = []
    for start in unknown:
        if start in comp:
            continue
        stack, members, touches_known = [start], [], False
        comp[start] = True
        while stack:
            v = stack.pop()
            members.append(v)
            for u in adjacency[v]:
                if known[u]:
                    touches_known = True
                elif u not in comp:
                    comp[u] = True
                    stack.append(u)
        if not touches_known:
            untouched.extend(members)
            heights[list(members)] = 0.0
    if untouched:
        report.append({"kind": "untouched-region", "vertices": sorted(untouched)})
        solve_set = np.array(sorted(set(unknown) - set(untouched)), dtype=int)
    else:
        solve_set = unknown
    if len(solve_set) == 0:
        return heights, report

    col = {v: i for i, v in enumerate(solve_set)}
    A = lil_matrix((len(solve_set), len(solve_set)))
    b = np.zeros(len(solve_set))
    for v in solve_set:
        i = col[v]
        neighbors = adjacency[v]
        A[i, i] = float(len(neighbors))
        for u in neighbors:
            if known[u]:
                b[i] += heights[u]
            else:
                A[i, col[u]] -= 1.0
    A = A.tocsr()
    x = spsolve(A, b)
    denom = max(float(np.linalg.norm(b)), 1e-300)
    residual = float(np.linalg.norm(A @ x - b)) / denom
    if residual > FILL_RESIDUAL:
        raise NoConvergence(f"laplace fill residual {residual:.2e}")
    heights[solve_set] = x
    return heights, report


def displace_mesh(mesh: SkinnedMesh, cloud: PointCloud, sample_radius: float,
                  sample_height: float):
    """Move every vertex along its normal onto the cloud-implied surface.

    Known heights come from sample_heights; empty sampling regions are
    reported and filled harmonically. With no known vertex at all the mesh
    is returned undisplaced (warned).
    """
    raw, known = sample_heights(mesh, cloud, sample_radius, sample_height)
    report = []
    out = mesh.copy()
    if not known.any():
        report.append({"kind": "all-empty"})
        return out, report
    if not known.all():
        report.append({
            "kind": "empty-sampling-region",
            "vertices": np.flatnonzero(~known).tolist(),
        })
    heights, fill_report = laplace_fill(mesh.adjacency(), raw, known)
    report.extend(fill_report)
    normals = mesh.normals / np.maximum(
        np.linalg.norm(mesh.normals, axis=1, keepdims=True), 1e-12
    )
    out.vertices = mesh.vertices + heights[:, None] * normals
    return out, report


def smooth(mesh: SkinnedMesh, iterations: int, lam: float) -> SkinnedMesh:
    """Laplacian smoothing: each vertex moves lam toward its neighbor mean."""
    if not (0.0 < lam <= 1.0):
        raise InvalidParams("lambda must be in (0, 1]")
    if iterations < 0:
        raise InvalidParams("iterations must be >= 0")
    adjacency = mesh.adjacency()
    out = mesh.copy()
    v = out.vertices
    for _ in range(iterations):
        means = v.copy()
        for i, neighbors in enumerate(adjacency):
            if neighbors:
                means[i] = v[neighbors].mean(axis=0)
        v = v + lam * (means - v)
    out.vertices = v
    return out
