"""Binding, posing, and rigid-body export for reconstructed trees.

Orphan cloud points are constrained to the nearest frustum edge so they ride
along when the tree articulates. Posing is linear blend skinning driven by
per-edge rigid transforms expressed in world space relative to the rest
pose, so the identity pose reproduces the rest geometry bit for bit. Export
turns every edge into a solid conical frustum with closed-form mass and
inertia, jointed to its neighbors with passthrough spring parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InconsistentPose, InvalidParams
from .pointcloud import PointCloud
from .skeleton import TreeSkeleton, edge_frame
from .skinning import SkinnedMesh

JOINT_TOLERANCE = 1e-6


# -- orphan binding ------------------------------------------------------------

@dataclass
class PointBinding:
    point: int
    edge: int
    local: np.ndarray  # coordinates in the edge frame
    distance: float


def point_segment_distance(p, a, b) -> float:
    p, a, b = (np.asarray(x, dtype=float) for x in (p, a, b))
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def bind_orphan_points(cloud: PointCloud, skeleton: TreeSkeleton) -> list[PointBinding]:
    """Bind each point to the closest frustum edge (lowest id on ties)."""
    cloud.require_nonempty()
    if not skeleton.edges:
        raise InvalidParams("skeleton has no edges")
    nm = skeleton.node_map()
    segments = [
        (np.asarray(nm[p].position, dtype=float),
         np.asarray(nm[c].position, dtype=float))
        for p, c in skeleton.edges
    ]
    frames = [edge_frame(skeleton, e) for e in range(len(skeleton.edges))]
    out = []
    for i, p in enumerate(cloud.points):
        best_edge, best_d = 0, np.inf
        for e, (a, b) in enumerate(segments):
            d = point_segment_distance(p, a, b)
            if d < best_d:  # strict: ties keep the lowest edge id
                best_edge, best_d = e, d
        origin, R = frames[best_edge]
        local = R.T @ (p - origin)
        out.append(PointBinding(i, best_edge, local, best_d))
    return out


# -- posing --------------------------------------------------------------------

def _as_rigid(transform):
    """Accept a (R, t) pair or a 3x4 matrix; return (R, t)."""
    if isinstance(transform, (tuple, list)) and len(transform) == 2:
        R = np.asarray(transform[0], dtype=float).reshape(3, 3)
        t = np.asarray(transform[1], dtype=float).reshape(3)
    else:
        m = np.asarray(transform, dtype=float)
        if m.shape != (3, 4):
            raise InvalidParams("pose transform must be (R, t) or 3x4")
        R, t = m[:, :3], m[:, 3]
    if abs(np.linalg.det(R) - 1.0) > 1e-6 or np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
        raise InvalidParams("pose transform is not a rotation")
    return R, t


def validate_pose(skeleton: TreeSkeleton, transforms: dict) -> dict:
    """Check every edge has a transform and shared joints stay welded.

    transforms map edge id to a world-space rigid motion applied to rest
    geometry. Consistency at a shared node: the two incident edges must map
    the node to the same place, else the bodies would tear apart.
    """
    rigid = {}
    for e in range(len(skeleton.edges)):
        if e not in transforms:
            raise InconsistentPose(f"missing transform for edge {e}")
        rigid[e] = _as_rigid(transforms[e])
    nm = skeleton.node_map()
    incident: dict[int, list[int]] = {}
    for e, (p, c) in enumerate(skeleton.edges):
        incident.setdefault(p, []).append(e)
        incident.setdefault(c, []).append(e)
    for node, edge_list in incident.items():
        if len(edge_list) < 2:
            continue
        x = np.asarray(nm[node].position, dtype=float)
        mapped = [R @ x + t for R, t in (rigid[e] for e in edge_list)]
        for m in mapped[1:]:
            if np.linalg.norm(m - mapped[0]) > JOINT_TOLERANCE * (1.0 + np.linalg.norm(x)):
                raise InconsistentPose(f"edges disagree at shared node {node}")
    return rigid


def pose(skeleton: TreeSkeleton, transforms: dict, mesh: SkinnedMesh,
         cloud: PointCloud | None = None,
         point_bindings: list[PointBinding] | None = None):
    """Apply per-edge rigid transforms to skinned geometry and bound points.

    vertex' = sum_i w_i (R_i v + t_i) over the vertex's bindings; orphan
    points move rigidly with their single bound edge. Identity transforms
    return bitwise-identical geometry.
    """
    rigid = validate_pose(skeleton, transforms)
    out = mesh.copy()
    for i, v in enumerate(mesh.vertices):
        acc = np.zeros(3)
        for edge, w in mesh.bindings[i]:
            R, t = rigid[edge]
            acc = acc + w * (R @ v + t)
        out.vertices[i] = acc
    posed_cloud = None
    if cloud is not None:
        if point_bindings is None:
            raise InvalidParams("cloud given without point bindings")
        pts = cloud.points.copy()
        for b in point_bindings:
            R, t = rigid[b.edge]
            pts[b.point] = R @ cloud.points[b.point] + t
        posed_cloud = PointCloud(pts, cloud.colors.copy())
    return out, posed_cloud


# -- rigid bodies --------------------------------------------------------------

@dataclass
class RigidBody:
    edge: int
    r1: float
    r2: float
    length: float
    mass: float
    inertia: np.ndarray        # about the center of mass, in the body frame
    com: np.ndarray            # world position of the center of mass
    axes: np.ndarray           # columns: body frame axes (z along the edge)


@dataclass
class Joint:
    parent_body: int
    child_body: int
    position: np.ndarray
    stiffness: float
    damping: float


@dataclass
class RigidBodyModel:
    bodies: list[RigidBody]
    joints: list[Joint]


def frustum_mass_properties(r1: float, r2: float, length: float, density: float):
    """Closed-form mass, center of mass, and inertia of a solid frustum.

    The frustum runs from radius r1 at z=0 to r2 at z=length along its own
    z axis. Inertia is about the center of mass: with
    S4 = r1^4 + r1^3 r2 + r1^2 r2^2 + r1 r2^3 + r2^4 (the degree-4 power
    sum from integrating r(z)^4),

        m    = pi rho L (r1^2 + r1 r2 + r2^2) / 3
        zbar = L (r1^2 + 2 r1 r2 + 3 r2^2) / (4 (r1^2 + r1 r2 + r2^2))
        Izz  = pi rho L S4 / 10
        Ixx  = Iyy = pi rho L S4 / 20
               + pi rho (L^3/30)(r1^2 + 3 r1 r2 + 6 r2^2)
               - pi rho zbar^2 (L/3)(r1^2 + r1 r2 + r2^2)

    validated against Monte-Carlo volume integration in the tests.
    """
    if r1 <= 0 or r2 <= 0 or length <= 0 or density <= 0:
        raise InvalidParams("frustum needs positive radii, length, density")
    s2 = r1 * r1 + r1 * r2 + r2 * r2
    s4 = r1**4 + r1**3 * r2 + r1**2 * r2**2 + r1 * r2**3 + r2**4
    mass = density * np.pi * length * s2 / 3.0
    zbar = length * (r1 * r1 + 2 * r1 * r2 + 3 * r2 * r2) / (4.0 * s2)
    izz = np.pi * density * length * s4 / 10.0
    ixx = (
        np.pi * density * length * s4 / 20.0
        + np.pi * density * length**3 * (r1 * r1 + 3 * r1 * r2 + 6 * r2 * r2) / 30.0
        - np.pi * density * zbar * zbar * length * s2 / 3.0
    )
    inertia = np.diag([ixx, ixx, izz])
    return float(mass), float(zbar), inertia


def export_rigid_bodies(skeleton: TreeSkeleton, density: float,
                        default_stiffness: float, default_damping: float) -> RigidBodyModel:
    """One solid frustum body per edge, spring joints at shared nodes."""
    if density <= 0:
        raise InvalidParams("density must be positive")
    skeleton.validate()
    nm = skeleton.node_map()
    bodies = []
    for e, (p, c) in enumerate(skeleton.edges):
        r1, r2 = nm[p].radius, nm[c].radius
        origin, axes = edge_frame(skeleton, e)
        length = float(np.linalg.norm(
            np.asarray(nm[c].position, dtype=float) - origin))
        mass, zbar, inertia = frustum_mass_properties(r1, r2, length, density)
        com = origin + zbar * axes[:, 2]
        bodies.append(RigidBody(e, float(r1), float(r2), length, mass,
                                inertia, com, axes))
    joints = []
    for e, (p, c) in enumerate(skeleton.edges):
        for e2, (p2, c2) in enumerate(skeleton.edges):
            if c == p2:  # edge e ends where edge e2 starts
                joints.append(Joint(e, e2,
                                    np.asarray(nm[c].position, dtype=float),
                                    float(default_stiffness), float(default_damping)))
    return RigidBodyModel(bodies, joints)


# -- json ----------------------------------------------------------------------

def rigid_model_to_dict(model: RigidBodyModel) -> dict:
    return {
        "bodies": [
            {
                "edge": b.edge, "r1": b.r1, "r2": b.r2, "length": b.length,
                "mass": b.mass,
                "inertia": [[float(x) for x in row] for row in b.inertia],
                "com": [float(x) for x in b.com],
                "axes": [[float(x) for x in row] for row in b.axes],
            }
            for b in model.bodies
        ],
        "joints": [
            {
                "parent_body": j.parent_body, "child_body": j.child_body,
                "position": [float(x) for x in j.position],
                "stiffness": j.stiffness, "damping": j.damping,
            }
            for j in model.joints
        ],
    }


def rigid_model_from_dict(data: dict) -> RigidBodyModel:
    bodies = [
        RigidBody(int(b["edge"]), float(b["r1"]), float(b["r2"]),
                  float(b["length"]), float(b["mass"]),
                  np.array(b["inertia"], dtype=float),
                  np.array(b["com"], dtype=float),
                  np.array(b["axes"], dtype=float))
        for b in data["bodies"]
    ]
    joints = [
        Joint(int(j["parent_body"]), int(j["child_body"]),
              np.array(j["position"], dtype=float),
              float(j["stiffness"]), float(j["damping"]))
        for j in data["joints"]
    ]
    return RigidBodyModel(bodies, joints)


def write_rigid_model(model: RigidBodyModel, path) -> None:
    with open(path, "w") as f:
        json.dump(rigid_model_to_dict(model), f, indent=2)


def read_rigid_model(path) -> RigidBodyModel:
    with open(path) as f:
        return rigid_model_from_dict(json.load(f))


def pose_to_dict(transforms: dict) -> dict:
    out = {}
    for edge, transform in transforms.items():
        R, t = _as_rigid(transform)
        out[str(int(edge))] = np.column_stack([R, t]).tolist()
    return {"edges": out}


def pose_from_dict(data: dict) -> dict:
    return {
        int(edge): np.array(matrix, dtype=float)
        for edge, matrix in data["edges"].items()
    }


def write_pose(transforms: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(pose_to_dict(transforms), f, indent=2)


def read_pose(path) -> dict:
    with open(path) as f:
        return pose_from_dict(json.load(f))
