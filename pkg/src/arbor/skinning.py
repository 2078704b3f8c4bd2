"""Sweep a skeleton into a single contiguous triangle mesh.

Every chain is swept as a tube: circular cross-sections of the local node
radius, oriented by parallel-transport (rotation-minimizing) frames, with
consecutive rings stitched by a quad strip. Chain ends of skeleton degree 1
are closed with triangle fans; at bifurcations the child tube starts on the
parent surface by reusing (welding to) the nearest vertices of the ring the
parent chain left at the shared node, which keeps the mesh connected without
any boolean work. Interpenetration at acute bifurcations is accepted.

Each vertex is bound to its generating frustum edge with weight 1, except
ring vertices at a node interior to a chain, which straddle two consecutive
frusta and blend them 50/50.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParams
from .skeleton import TreeSkeleton, seed_normal

DEFAULT_COLOR = (0.5, 0.5, 0.5)


@dataclass
class SkinnedMesh:
    """Triangle mesh with per-vertex normals, colors, and bone bindings.

    chain_id and arc_fraction record, for every vertex, which skeleton chain
    generated it and the fractional arc length along that chain; texturing
    keys off them.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None
    bindings: list | None = None
    chain_id: np.ndarray | None = None
    arc_fraction: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=int).reshape(-1, 3)
        n = len(self.vertices)
        if self.normals is None:
            self.normals = np.zeros((n, 3))
        else:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if self.colors is None:
            self.colors = np.tile(np.array(DEFAULT_COLOR), (n, 1))
        else:
            self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        if self.bindings is None:
            self.bindings = [((0, 1.0),) for _ in range(n)]
        if self.chain_id is None:
            self.chain_id = np.full(n, -1, dtype=int)
        if self.arc_fraction is None:
            self.arc_fraction = np.zeros(n)

    def validate(self) -> None:
        n = len(self.vertices)
        if len(self.triangles) and not (
            (self.triangles >= 0).all() and (self.triangles < n).all()
        ):
            raise InvalidParams("triangle index out of range")
        for i, binds in enumerate(self.bindings):
            if not binds or len(binds) > 2:
                raise InvalidParams(f"vertex {i} has {len(binds)} bindings")
            if abs(sum(w for _, w in binds) - 1.0) > 1e-12:
                raise InvalidParams(f"vertex {i} binding weights do not sum to 1")

    def adjacency(self) -> list[list[int]]:
        """Neighbor lists from triangle connectivity."""
        adj = [set() for _ in range(len(self.vertices))]
        for a, b, c in self.triangles:
            adj[a].update((b, c))
            adj[b].update((a, c))
            adj[c].update((a, b))
        return [sorted(s) for s in adj]

    def copy(self) -> "SkinnedMesh":
        return SkinnedMesh(
            self.vertices.copy(), self.triangles.copy(), self.normals.copy(),
            self.colors.copy(), [tuple(b) for b in self.bindings],
            self.chain_id.copy(), self.arc_fraction.copy(),
        )


def transport_frames(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parallel-transport frames along a polyline.

    Tangents come from central differences; each frame is the previous one
    rotated by the minimal rotation taking the old tangent to the new, so no
    step introduces any rotation about the tangent. Returns (t, n, b) arrays.
    """
    points = np.asarray(points, dtype=float)
    k = len(points)
    if k < 2:
        raise InvalidParams("need at least two points for frames")
    tangents = np.gradient(points, axis=0)
    norms = np.linalg.norm(tangents, axis=1, keepdims=True)
    if (norms < 1e-12).any():
        raise InvalidParams("degenerate tangent along chain")
    tangents = tangents / norms

    normals = np.zeros_like(tangents)
    normals[0] = seed_normal(tangents[0])
    for i in range(k - 1):
        t0, t1 = tangents[i], tangents[i + 1]
        axis = np.cross(t0, t1)
        s = np.linalg.norm(axis)
        c = float(np.clip(t0 @ t1, -1.0, 1.0))
        if s < 1e-15:
            normals[i + 1] = normals[i]
            continue
        axis = axis / s
        n = normals[i]
        # Rodrigues rotation of the previous normal about t0 x t1
        normals[i + 1] = (
            n * c + np.cross(axis, n) * s + axis * (axis @ n) * (1.0 - c)
        )
        normals[i + 1] /= np.linalg.norm(normals[i + 1])
    binormals = np.cross(tangents, normals)
    return tangents, normals, binormals


def ring_points(center, radius, normal, binormal, sides):
    theta = 2.0 * np.pi * np.arange(sides) / sides
    dirs = np.outer(np.cos(theta), normal) + np.outer(np.sin(theta), binormal)
    return center + radius * dirs, dirs


def skin_skeleton(skeleton: TreeSkeleton, ring_sides: int = 16) -> SkinnedMesh:
    if ring_sides < 3:
        raise InvalidParams("ring_sides must be >= 3")
    skeleton.validate()
    nm = skeleton.node_map()
    deg = skeleton.degrees()
    eidx = skeleton.edge_index()
    chains = skeleton.chains()

    verts: list[np.ndarray] = []
    norms: list[np.ndarray] = []
    binds: list[tuple] = []
    chain_ids: list[int] = []
    arcs: list[float] = []
    tris: list[tuple[int, int, int]] = []
    node_rings: dict[int, list[int]] = {}

    def add_vertex(p, n, b, cid, arc) -> int:
        verts.append(np.asarray(p, dtype=float))
        norms.append(np.asarray(n, dtype=float))
        binds.append(b)
        chain_ids.append(cid)
        arcs.append(float(arc))
        return len(verts) - 1

    for cid, chain in enumerate(chains):
        pos = np.array([nm[v].position for v in chain])
        rad = np.array([nm[v].radius for v in chain])
        tangents, normals, binormals = transport_frames(pos)
        seg = np.linalg.norm(np.diff(pos, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        frac = cum / cum[-1] if cum[-1] > 0 else cum

        chain_edges = [eidx[(chain[i], chain[i + 1])] for i in range(len(chain) - 1)]

        def ring_binding(i):
            if i == 0:
                return ((chain_edges[0], 1.0),)
            if i == len(chain) - 1:
                return ((chain_edges[-1], 1.0),)
            return ((chain_edges[i - 1], 0.5), (chain_edges[i], 0.5))

        rings: list[list[int]] = []
        for i, node in enumerate(chain):
            if i == 0 and node in node_rings:
                # weld: reuse the nearest vertices of the ring already left
                # at this shared node instead of emitting a fresh ring
                ideal, _ = ring_points(pos[0], rad[0], normals[0], binormals[0],
                                       ring_sides)
                host = node_rings[node]
                host_pos = np.array([verts[j] for j in host])
                ring = []
                for p in ideal:
                    d = np.linalg.norm(host_pos - p, axis=1)
                    ring.append(host[int(np.argmin(d))])
                rings.append(ring)
                continue
            points, dirs = ring_points(pos[i], rad[i], normals[i], binormals[i],
                                       ring_sides)
            b = ring_binding(i)
            ring = [add_vertex(p, d, b, cid, frac[i]) for p, d in zip(points, dirs)]
            rings.append(ring)
            if node not in node_rings:
                node_rings[node] = ring

        for i in range(len(chain) - 1):
            a, b = rings[i], rings[i + 1]
            for j in range(ring_sides):
                k = (j + 1) % ring_sides
                tris.append((a[j], a[k], b[k]))
                tris.append((a[j], b[k], b[j]))

        # fans close tube ends that belong to no other edge
        if deg[chain[0]] == 1:
            center = add_vertex(pos[0], -tangents[0], ring_binding(0), cid, 0.0)
            ring = rings[0]
            for j in range(ring_sides):
                k = (j + 1) % ring_sides
                tris.append((center, ring[k], ring[j]))
        if deg[chain[-1]] == 1:
            center = add_vertex(pos[-1], tangents[-1],
                                ring_binding(len(chain) - 1), cid, 1.0)
            ring = rings[-1]
            for j in range(ring_sides):
                k = (j + 1) % ring_sides
                tris.append((center, ring[j], ring[k]))

    mesh = SkinnedMesh(
        np.array(verts), np.array(tris, dtype=int), np.array(norms),
        None, binds, np.array(chain_ids), np.array(arcs),
    )
    mesh.validate()
    return mesh


# -- obj -----------------------------------------------------------------------

def write_obj(mesh: SkinnedMesh, path) -> None:
    """OBJ with per-vertex color as extended 'v x y z r g b' lines."""
    with open(path, "w") as f:
        for p, c in zip(mesh.vertices, mesh.colors):
            f.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g} "
                    f"{c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
        for a, b, c in mesh.triangles:
            f.write(f"f {a + 1} {b + 1} {c + 1}\n")


def read_obj(path) -> SkinnedMesh:
    """Read 'v x y z [r g b]' and triangular 'f' lines; normals recomputed."""
    vertices, colors, triangles = [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:]]
                vertices.append(vals[:3])
                colors.append(vals[3:6] if len(vals) >= 6 else list(DEFAULT_COLOR))
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                if len(idx) != 3:
                    raise InvalidParams("only triangular faces are supported")
                triangles.append(idx)
    mesh = SkinnedMesh(np.array(vertices, dtype=float).reshape(-1, 3),
                       np.array(triangles, dtype=int).reshape(-1, 3),
                       colors=np.array(colors, dtype=float).reshape(-1, 3))
    mesh.normals = vertex_normals(mesh)
    return mesh


def vertex_normals(mesh: SkinnedMesh) -> np.ndarray:
    """Area-weighted average of incident face normals."""
    out = np.zeros_like(mesh.vertices)
    v = mesh.vertices
    for a, b, c in mesh.triangles:
        fn = np.cross(v[b] - v[a], v[c] - v[a])
        out[a] += fn
        out[b] += fn
        out[c] += fn
    lens = np.linalg.norm(out, axis=1, keepdims=True)
    lens[lens < 1e-20] = 1.0
    return out / lens
