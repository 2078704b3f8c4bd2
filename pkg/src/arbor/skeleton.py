"""Generalized-cylinder skeletons: b-spline centerlines resampled from branch graphs.

A skeleton is a tree of nodes, each carrying a position and a cross-sectional
radius; every edge is one conical frustum. Branch graphs are converted by
fitting a clamped uniform cubic b-spline through each maximal chain of
degree <= 2 vertices (the lifted annotation vertices act as control points,
not interpolation points) and resampling it at a caller-chosen density.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import CyclicInput, InvalidParams

UP_SEED = np.array([0.0, 1.0, 0.0])
X_SEED = np.array([1.0, 0.0, 0.0])


@dataclass
class SkeletonNode:
    id: int
    position: np.ndarray
    radius: float


@dataclass
class TreeSkeleton:
    """Nodes plus parent->child edges; each node has 0, 1, or 2 children."""

    nodes: list[SkeletonNode]
    edges: list[tuple[int, int]]
    root: int = 0

    def node_map(self) -> dict[int, SkeletonNode]:
        return {n.id: n for n in self.nodes}

    def children(self) -> dict[int, list[int]]:
        ch: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for parent, child in self.edges:
            ch[parent].append(child)
        return ch

    def degrees(self) -> dict[int, int]:
        deg = {n.id: 0 for n in self.nodes}
        for parent, child in self.edges:
            deg[parent] += 1
            deg[child] += 1
        return deg

    def edge_index(self) -> dict[tuple[int, int], int]:
        return {e: i for i, e in enumerate(self.edges)}

    def validate(self) -> None:
        """Raise InvalidParams on any broken structural invariant."""
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise InvalidParams("duplicate node ids")
        nm = self.node_map()
        if self.root not in nm:
            raise InvalidParams("root id not among nodes")
        for n in self.nodes:
            if not np.isfinite(n.position).all():
                raise InvalidParams(f"node {n.id} has non-finite position")
            if not (n.radius > 0):
                raise InvalidParams(f"node {n.id} has non-positive radius")
        ch = self.children()
        seen = {self.root}
        stack = [self.root]
        while stack:
            v = stack.pop()
            if len(ch[v]) > 2:
                raise InvalidParams(f"node {v} has more than two children")
            for c in ch[v]:
                if c in seen:
                    raise CyclicInput(f"node {c} reached twice")
                seen.add(c)
                stack.append(c)
        if len(seen) != len(self.nodes):
            raise InvalidParams("skeleton is not connected from the root")

    def chains(self) -> list[list[int]]:
        """Maximal runs of single-child nodes, split at bifurcations.

        Each chain includes both boundary nodes; chains are listed so that a
        chain ending at a bifurcation precedes the chains starting there.
        """
        ch = self.children()
        out = []
        stack = [self.root]
        while stack:
            start = stack.pop()
            for first in reversed(ch[start]):
                path = [start, first]
                while len(ch[path[-1]]) == 1:
                    path.append(ch[path[-1]][0])
                out.append(path)
                if ch[path[-1]]:
                    stack.append(path[-1])
        return out


def seed_normal(tangent: np.ndarray) -> np.ndarray:
    """First frame normal: up cross tangent, x-axis seed when parallel."""
    n = np.cross(UP_SEED, tangent)
    if np.linalg.norm(n) < 1e-9:
        n = np.cross(X_SEED, tangent)
    return n / np.linalg.norm(n)


def edge_frame(skeleton: TreeSkeleton, edge_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic local frame of a frustum edge.

    Returns (origin, R) with origin at the parent node and R's columns the
    frame axes; z runs parent to child, x seeded like the skinning frames.
    Local coordinates map to world as origin + R @ local.
    """
    nm = skeleton.node_map()
    parent, child = skeleton.edges[edge_id]
    origin = np.asarray(nm[parent].position, dtype=float)
    axis = np.asarray(nm[child].position, dtype=float) - origin
    length = np.linalg.norm(axis)
    if length < 1e-12:
        raise InvalidParams(f"edge {edge_id} has zero length")
    z = axis / length
    x = seed_normal(z)
    y = np.cross(z, x)
    return origin, np.column_stack([x, y, z])


# -- b-spline chains -----------------------------------------------------------

def clamped_spline(control: np.ndarray, degree: int | None = None) -> BSpline:
    """Uniform clamped b-spline with the given control points."""
    control = np.asarray(control, dtype=float)
    n = len(control)
    k = min(3, n - 1) if degree is None else degree
    interior = np.linspace(0.0, 1.0, n - k + 1)[1:-1]
    knots = np.concatenate([np.zeros(k + 1), interior, np.ones(k + 1)])
    return BSpline(knots, control, k)


def greville_parameters(spline: BSpline) -> np.ndarray:
    k = spline.k
    t = spline.t
    n = len(spline.c)
    return np.array([t[j + 1 : j + k + 1].mean() for j in range(n)])


def _resample_chain(positions, radii, samples_per_segment):
    """Spline-resample one chain of control vertices.

    Returns (points, radii) with (len(positions)-1)*samples_per_segment + 1
    samples. Radii are anchored at the curve points of the control points'
    Greville parameters and linearly interpolated in fractional arc length
    between anchors, so endpoint radii are preserved exactly.
    """
    positions = np.asarray(positions, dtype=float)
    radii = np.asarray(radii, dtype=float)
    spline = clamped_spline(positions)
    count = (len(positions) - 1) * samples_per_segment + 1
    u = np.linspace(0.0, 1.0, count)
    points = spline(u)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        raise InvalidParams("chain has zero length")
    frac = cum / total
    anchors = np.interp(greville_parameters(spline), u, frac)
    out_radii = np.interp(frac, anchors, radii)
    return points, out_radii


def skeleton_from_branches(branch, samples_per_segment: int = 4) -> TreeSkeleton:
    """Resample a lifted branch graph into a generalized-cylinder skeleton.

    Each maximal chain of degree <= 2 branch vertices becomes a clamped
    uniform cubic b-spline with those vertex positions as control points
    (degenerating gracefully for short chains), evaluated at
    samples_per_segment points per control segment. Bifurcation vertices
    become shared skeleton nodes. Every branch vertex must carry a positive
    thickness; radii between control anchors follow fractional arc length.
    """
    if samples_per_segment < 1:
        raise InvalidParams("samples_per_segment must be >= 1")
    if not branch.roots:
        raise InvalidParams("branch has no root")
    root = branch.roots[0]
    vm = branch.vertex_map()
    adj = branch.adjacency()

    # rooted traversal; a revisit means the undirected graph has a cycle
    parent: dict[int, int | None] = {root: None}
    order = [root]
    stack = [root]
    while stack:
        v = stack.pop()
        for u in adj[v]:
            if u == parent[v]:
                continue
            if u in parent:
                raise CyclicInput(f"branch vertex {u} reached twice")
            parent[u] = v
            order.append(u)
            stack.append(u)
    if len(parent) != len(branch.vertices):
        raise InvalidParams("branch graph is not connected from its root")

    children: dict[int, list[int]] = {v.id: [] for v in branch.vertices}
    for v in order[1:]:
        children[parent[v]].append(v)

    for v in branch.vertices:
        if v.thickness is None or not (v.thickness > 0):
            raise InvalidParams(f"branch vertex {v.id} lacks a positive thickness")

    nodes: list[SkeletonNode] = []
    edges: list[tuple[int, int]] = []
    node_of: dict[int, int] = {}

    def add_node(position, radius) -> int:
        nid = len(nodes)
        nodes.append(SkeletonNode(nid, np.asarray(position, dtype=float), float(radius)))
        return nid

    node_of[root] = add_node(vm[root].position, vm[root].thickness)

    stack = [root]
    while stack:
        start = stack.pop()
        for first in reversed(children[start]):
            chain = [start, first]
            while len(children[chain[-1]]) == 1:
                chain.append(children[chain[-1]][0])
            last = chain[-1]
            points, radii = _resample_chain(
                [vm[v].position for v in chain],
                [vm[v].thickness for v in chain],
                samples_per_segment,
            )
            prev = node_of[start]
            for p, r in zip(points[1:-1], radii[1:-1]):
                nid = add_node(p, r)
                edges.append((prev, nid))
                prev = nid
            if last not in node_of:
                node_of[last] = add_node(vm[last].position, vm[last].thickness)
            edges.append((prev, node_of[last]))
            if children[last]:
                stack.append(last)

    skeleton = TreeSkeleton(nodes, edges, root=node_of[root])
    skeleton.validate()
    return skeleton


# -- chain geometry queries ----------------------------------------------------

def chain_arc_table(skeleton: TreeSkeleton, chain: list[int]):
    """(fractions, positions, radii) along one chain's polyline."""
    nm = skeleton.node_map()
    pos = np.array([nm[v].position for v in chain], dtype=float)
    rad = np.array([nm[v].radius for v in chain], dtype=float)
    seg = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1] if cum[-1] > 0 else 1.0
    return cum / total, pos, rad


def chain_point(fractions, positions, radii, s: float):
    """Interpolated (point, tangent, radius) at fractional arc length s."""
    s = float(np.clip(s, 0.0, 1.0))
    point = np.array([np.interp(s, fractions, positions[:, i]) for i in range(3)])
    radius = float(np.interp(s, fractions, radii))
    i = int(np.clip(np.searchsorted(fractions, s, side="right") - 1, 0,
                    len(fractions) - 2))
    tangent = positions[i + 1] - positions[i]
    norm = np.linalg.norm(tangent)
    if norm < 1e-12:
        tangent = np.array([0.0, 0.0, 1.0])
    else:
        tangent = tangent / norm
    return point, tangent, radius


# -- json ----------------------------------------------------------------------

def skeleton_to_dict(skeleton: TreeSkeleton) -> dict:
    return {
        "root": skeleton.root,
        "nodes": [
            {"id": n.id, "position": [float(x) for x in n.position],
             "radius": float(n.radius)}
            for n in skeleton.nodes
        ],
        "edges": [[int(p), int(c)] for p, c in skeleton.edges],
    }


def skeleton_from_dict(data: dict) -> TreeSkeleton:
    nodes = [
        SkeletonNode(int(n["id"]), np.array(n["position"], dtype=float),
                     float(n["radius"]))
        for n in data["nodes"]
    ]
    edges = [(int(p), int(c)) for p, c in data["edges"]]
    return TreeSkeleton(nodes, edges, root=int(data["root"]))


def write_skeleton(skeleton: TreeSkeleton, path) -> None:
    with open(path, "w") as f:
        json.dump(skeleton_to_dict(skeleton), f, indent=2)


def read_skeleton(path) -> TreeSkeleton:
    with open(path) as f:
        return skeleton_from_dict(json.load(f))
