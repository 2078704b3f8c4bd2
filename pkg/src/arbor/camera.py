"""Pinhole camera model: projection, rays, epipolar geometry, and PnP pose recovery.

Conventions (used throughout the toolkit):
  * extrinsics map world to camera: x_cam = R @ x_world + t
  * pixel coordinates have x right, y down, origin at the top-left pixel center
  * no lens distortion (4-parameter pinhole)
"""

from __future__ import annotations

import json

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CoincidentCenters,
    DegenerateConfiguration,
    NoConvergence,
    NonPositiveDepth,
    RayParallelToPlane,
)

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the sensor")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Extrinsics:
    """World-to-camera rigid transform."""

    R: np.ndarray  # (3,3) rotation
    t: np.ndarray  # (3,) translation

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("R must be 3x3")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("R must be a proper rotation (det +1)")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        """Optical center in world coordinates, -R^T t."""
        return -self.R.T @ self.t


@dataclass(frozen=True)
class Camera:
    id: str
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    aligned: bool = True

    @property
    def center(self) -> np.ndarray:
        return self.extrinsics.center

    @property
    def view_axis(self) -> np.ndarray:
        """Unit optical axis in world coordinates (camera +z)."""
        return self.extrinsics.R[2].copy()

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.extrinsics.R.T + self.extrinsics.t


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-12:
            if n == 0:
                raise ValueError("ray direction must be nonzero")
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


def project(camera: Camera, point) -> np.ndarray:
    """Project a world point to pixel coordinates.

    Raises NonPositiveDepth if the point is at or behind the camera plane.
    """
    pc = camera.world_to_cam(np.asarray(point, dtype=float).reshape(3))
    if pc[2] <= 0:
        raise NonPositiveDepth(f"point at camera depth {pc[2]:.6g}")
    intr = camera.intrinsics
    return np.array(
        [intr.fx * pc[0] / pc[2] + intr.cx, intr.fy * pc[1] / pc[2] + intr.cy]
    )


def project_many(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (pixels (n,2), valid (n,) mask of z>0)."""
    pc = camera.world_to_cam(np.asarray(points, dtype=float).reshape(-1, 3))
    valid = pc[:, 2] > 0
    z = np.where(valid, pc[:, 2], 1.0)
    intr = camera.intrinsics
    px = np.stack(
        [intr.fx * pc[:, 0] / z + intr.cx, intr.fy * pc[:, 1] / z + intr.cy], axis=1
    )
    return px, valid


def pixel_ray(camera: Camera, pixel) -> Ray:
    """World-space ray from the optical center through a pixel."""
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    intr = camera.intrinsics
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d_world = camera.extrinsics.R.T @ d_cam
    return Ray(camera.center, d_world / np.linalg.norm(d_world))


def parallel_plane_intersect(camera: Camera, ray: Ray, anchor) -> np.ndarray:
    """Intersect a ray with the plane through `anchor` parallel to the image plane.

    The plane normal is the camera view axis; raises RayParallelToPlane when the
    ray direction is perpendicular to it.
    """
    n = camera.view_axis
    denom = float(np.dot(ray.direction, n))
    if abs(denom) <= 1e-12:
        raise RayParallelToPlane("ray lies in a plane parallel to the image plane")
    anchor = np.asarray(anchor, dtype=float).reshape(3)
    s = float(np.dot(anchor - ray.origin, n)) / denom
    return ray.at(s)


def fundamental_matrix(cam1: Camera, cam2: Camera) -> np.ndarray:
    """Fundamental matrix F with x2^T F x1 = 0 for homogeneous pixels x1 in cam1, x2 in cam2.

    Normalized to unit Frobenius norm. Raises CoincidentCenters when the baseline
    vanishes (epipolar geometry undefined).
    """
    c1, c2 = cam1.center, cam2.center
    if np.linalg.norm(c1 - c2) <= 1e-9:
        raise CoincidentCenters("cameras share an optical center")
    R1, t1 = cam1.extrinsics.R, cam1.extrinsics.t
    R2, t2 = cam2.extrinsics.R, cam2.extrinsics.t
    R12 = R2 @ R1.T
    t12 = t2 - R12 @ t1
    tx = np.array(
        [[0, -t12[2], t12[1]], [t12[2], 0, -t12[0]], [-t12[1], t12[0], 0]]
    )
    E = tx @ R12
    K1inv = np.linalg.inv(cam1.intrinsics.K)
    K2inv = np.linalg.inv(cam2.intrinsics.K)
    F = K2inv.T @ E @ K1inv
    return F / np.linalg.norm(F)


def epipolar_line(F: np.ndarray, pixel) -> np.ndarray:
    """Line coefficients (a, b, c) in image 2 for a pixel in image 1: a*x + b*y + c = 0."""
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    return F @ np.array([u, v, 1.0])


def closest_point_on_line(line, pixel) -> np.ndarray:
    """Orthogonal projection of a pixel onto the line a*x + b*y + c = 0."""
    a, b, c = line
    p = np.asarray(pixel, dtype=float).reshape(2)
    n2 = a * a + b * b
    if n2 == 0:
        raise ValueError("degenerate line")
    d = (a * p[0] + b * p[1] + c) / n2
    return p - d * np.array([a, b])


# -- perspective-n-point -----------------------------------------------------


@dataclass
class PnPResult:
    extrinsics: Extrinsics
    rms_px: float
    iterations: int
    rms_history: list = field(default_factory=list)
    inliers: np.ndarray | None = None


def _rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        W = _skew(w)
        return np.eye(3) + W  # first-order; exact enough below 1e-12
    k = w / theta
    K = _skew(k)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def _matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-9:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs using off-diagonals
        i = int(np.argmax(axis))
        if axis[i] > 0:
            for j in range(3):
                if j != i:
                    axis[j] = A[i, j] / axis[i]
        n = np.linalg.norm(axis)
        return axis / n * theta if n > 0 else np.zeros(3)
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return axis / (2.0 * np.sin(theta)) * theta


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def _pnp_dlt(X: np.ndarray, xn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Direct linear transform for [R|t] from 3D points and normalized image coords."""
    n = len(X)
    A = np.zeros((2 * n, 12))
    Xh = np.hstack([X, np.ones((n, 1))])
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:2] * Xh
    _, S, Vt = np.linalg.svd(A)
    # a one-dimensional nullspace is required; coplanar/collinear scenes widen it
    if S[-2] < 1e-9 * max(S[0], 1e-300):
        raise DegenerateConfiguration("linear PnP system is rank deficient")
    P = Vt[-1].reshape(3, 4)
    M = P[:, :3]
    U, Sm, Vt2 = np.linalg.svd(M)
    if np.min(Sm) < 1e-12 * max(np.max(Sm), 1e-300):
        raise DegenerateConfiguration("degenerate projection matrix")
    scale = np.mean(Sm)
    R = U @ Vt2
    if np.linalg.det(R) < 0:
        R = -R
        scale = -scale
    # det correction above also flips `scale`, so the DLT sign ambiguity cancels here
    t = P[:, 3] / scale
    return R, t


def _reprojection_residuals(w, t, X, px, intr) -> np.ndarray:
    R = _rotvec_to_matrix(w)
    pc = X @ R.T + t
    z = np.maximum(pc[:, 2], 1e-9)
    u = intr.fx * pc[:, 0] / z + intr.cx
    v = intr.fy * pc[:, 1] / z + intr.cy
    return np.concatenate([u - px[:, 0], v - px[:, 1]])


def _points_degenerate(X: np.ndarray) -> bool:
    Xc = X - X.mean(axis=0)
    s = np.linalg.svd(Xc, compute_uv=False)
    return s[2] < 1e-9 * max(s[0], 1e-300)


def solve_pnp(
    correspondences,
    intrinsics: Intrinsics,
    ransac: bool = False,
    inlier_threshold_px: float = 4.0,
    ransac_iterations: int = 200,
    seed: int = 0,
    max_refine_iterations: int = 100,
) -> PnPResult:
    """Recover world-to-camera extrinsics from (world point, pixel) correspondences.

    DLT initialization followed by damped Gauss-Newton on the reprojection error.
    With ransac=True, minimal 6-point samples vote with `inlier_threshold_px` and
    the final refinement runs on the inlier set.

    Raises DegenerateConfiguration for <6 or coplanar/collinear points and
    NoConvergence if refinement produces no usable pose.
    """
    pts = [(np.asarray(X, dtype=float).reshape(3), np.asarray(x, dtype=float).reshape(2))
           for X, x in correspondences]
    if len(pts) < 6:
        raise DegenerateConfiguration(f"need >= 6 correspondences, got {len(pts)}")
    X = np.array([p[0] for p in pts])
    px = np.array([p[1] for p in pts])
    if _points_degenerate(X):
        raise DegenerateConfiguration("3D points are coplanar or collinear")

    xn = np.stack(
        [(px[:, 0] - intrinsics.cx) / intrinsics.fx, (px[:, 1] - intrinsics.cy) / intrinsics.fy],
        axis=1,
    )

    inliers = None
    if ransac:
        rng = np.random.default_rng(seed)
        best_count, best_idx = -1, None
        for _ in range(ransac_iterations):
            sample = rng.choice(len(X), size=6, replace=False)
            if _points_degenerate(X[sample]):
                continue
            try:
                R0, t0 = _pnp_dlt(X[sample], xn[sample])
            except DegenerateConfiguration:
                continue
            r = _reprojection_residuals(_matrix_to_rotvec(R0), t0, X, px, intrinsics)
            err = np.hypot(r[: len(X)], r[len(X):])
            count = int(np.sum(err <= inlier_threshold_px))
            if count > best_count:
                best_count, best_idx = count, np.where(err <= inlier_threshold_px)[0]
        if best_idx is None or best_count < 6:
            raise DegenerateConfiguration("RANSAC found no 6-inlier consensus")
        inliers = best_idx
        X_fit, px_fit, xn_fit = X[best_idx], px[best_idx], xn[best_idx]
    else:
        X_fit, px_fit, xn_fit = X, px, xn

    R0, t0 = _pnp_dlt(X_fit, xn_fit)
    w = _matrix_to_rotvec(R0)
    t = t0.copy()

    # damped Gauss-Newton; steps are only accepted when the cost decreases,
    # so the recorded RMS history is non-increasing
    lam = 1e-3
    r = _reprojection_residuals(w, t, X_fit, px_fit, intrinsics)
    cost = float(r @ r)
    history = [float(np.sqrt(cost / len(X_fit)))]
    iterations = 0
    for _ in range(max_refine_iterations):
        J = _numeric_jacobian(w, t, X_fit, px_fit, intrinsics)
        JtJ = J.T @ J
        g = J.T @ r
        accepted = False
        for _ in range(25):
            try:
                delta = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ)) + 1e-15 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            w_new, t_new = w + delta[:3], t + delta[3:]
            r_new = _reprojection_residuals(w_new, t_new, X_fit, px_fit, intrinsics)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                w, t, r, cost = w_new, t_new, r_new, cost_new
                lam = max(lam / 10, 1e-12)
                accepted = True
                break
            lam *= 10
        iterations += 1
        history.append(float(np.sqrt(cost / len(X_fit))))
        if not accepted or (len(history) > 1 and history[-2] - history[-1] < 1e-14):
            break

    if not np.isfinite(cost):
        raise NoConvergence("refinement diverged")
    R = _rotvec_to_matrix(w)
    # re-orthonormalize before constructing (guards accumulated drift)
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    rms = float(np.sqrt(cost / len(X_fit)))
    return PnPResult(Extrinsics(R, t), rms, iterations, history, inliers)


def _numeric_jacobian(w, t, X, px, intr, eps: float = 1e-7) -> np.ndarray:
    p0 = np.concatenate([w, t])
    r0 = _reprojection_residuals(w, t, X, px, intr)
    J = np.zeros((len(r0), 6))
    for i in range(6):
        p = p0.copy()
        p[i] += eps
        J[:, i] = (_reprojection_residuals(p[:3], p[3:], X, px, intr) - r0) / eps
    return J


# -- json ----------------------------------------------------------------------

def camera_to_dict(camera: Camera) -> dict:
    intr = camera.intrinsics
    return {
        "id": camera.id,
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height,
        "R": [[float(x) for x in row] for row in camera.extrinsics.R],
        "t": [float(x) for x in camera.extrinsics.t],
        "aligned": bool(camera.aligned),
    }


def camera_from_dict(data: dict) -> Camera:
    intr = Intrinsics(fx=float(data["fx"]), fy=float(data["fy"]),
                      cx=float(data["cx"]), cy=float(data["cy"]),
                      width=int(data["width"]), height=int(data["height"]))
    extr = Extrinsics(np.array(data["R"], dtype=float),
                      np.array(data["t"], dtype=float))
    return Camera(str(data["id"]), intr, extr,
                  aligned=bool(data.get("aligned", True)))


def write_cameras(cameras, path) -> None:
    with open(path, "w") as f:
        json.dump({"cameras": [camera_to_dict(c) for c in cameras]}, f,
                  indent=2)


def read_cameras(path) -> list[Camera]:
    with open(path) as f:
        data = json.load(f)
    return [camera_from_dict(c) for c in data["cameras"]]
