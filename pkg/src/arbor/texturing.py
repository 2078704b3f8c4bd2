"""Per-vertex mesh colors, from a point cloud or from annotated images.

Nearest-point texturing copies the color of the single closest cloud point,
deliberately without averaging. Image texturing maps each tube vertex to a
position on an annotated 2D curve via its fractional arc length along the
chain and its fractional thickness across the local width, samples the image
there, and keeps the sample with the best quality score
q = max(0, n_hat . v_hat) / (1 + d^2), favoring close, well-facing cameras.
The functional form of q is a documented choice and easy to swap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera import project
from .errors import InvalidParams, NonPositiveDepth
from .pointcloud import PointCloud
from .skeleton import TreeSkeleton, chain_arc_table, chain_point
from .skinning import SkinnedMesh


def texture_nearest(mesh: SkinnedMesh, cloud: PointCloud) -> np.ndarray:
    """Color of the exact nearest cloud point, per vertex. No blending."""
    cloud.require_nonempty()
    tree = cKDTree(cloud.points)
    _, idx = tree.query(mesh.vertices)
    return cloud.colors[idx].copy()


@dataclass
class ImageCurve:
    """An annotated branch curve in one image, matched to a skeleton chain.

    points: (M, 2) pixel polyline along the medial axis; half_widths: (M,)
    pixel half-widths at those polyline points.
    """

    camera_id: str
    chain: int
    points: np.ndarray
    half_widths: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.half_widths = np.asarray(self.half_widths, dtype=float).reshape(-1)
        if len(self.points) < 2:
            raise InvalidParams("image curve needs at least two points")
        if len(self.half_widths) != len(self.points):
            raise InvalidParams("half_widths and points differ in length")

    def fractions(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        return cum / cum[-1] if cum[-1] > 0 else cum

    def at(self, s: float):
        """(point, unit tangent, half width) at fractional arc length s."""
        s = float(np.clip(s, 0.0, 1.0))
        frac = self.fractions()
        p = np.array([np.interp(s, frac, self.points[:, i]) for i in range(2)])
        w = float(np.interp(s, frac, self.half_widths))
        i = int(np.clip(np.searchsorted(frac, s, side="right") - 1, 0,
                        len(frac) - 2))
        t = self.points[i + 1] - self.points[i]
        norm = np.linalg.norm(t)
        t = t / norm if norm > 1e-12 else np.array([1.0, 0.0])
        return p, t, w


def sample_bilinear(image: np.ndarray, xy) -> np.ndarray | None:
    """Bilinear color sample at pixel (x, y); None when outside the image."""
    h, w = image.shape[:2]
    x, y = float(xy[0]), float(xy[1])
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        return None
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = (1 - fx) * image[y0, x0] + fx * image[y0, x1]
    bot = (1 - fx) * image[y1, x0] + fx * image[y1, x1]
    return np.asarray((1 - fy) * top + fy * bot, dtype=float)


def texture_from_images(mesh: SkinnedMesh, skeleton: TreeSkeleton,
                        curves: list[ImageCurve], cameras, images):
    """Best-quality image sample per vertex; uncolored vertices reported.

    cameras: mapping or list of Camera; images: {camera_id: HxWx3 float array
    in [0, 1]}. Vertices keep the mesh default color when no curve yields a
    positive-quality in-bounds sample.
    """
    cam_map = cameras if isinstance(cameras, dict) else {c.id: c for c in cameras}
    chains = skeleton.chains()
    tables = [chain_arc_table(skeleton, chain) for chain in chains]
    by_chain: dict[int, list[ImageCurve]] = {}
    for curve in curves:
        by_chain.setdefault(curve.chain, []).append(curve)

    colors = mesh.colors.copy()
    uncolored = []
    for i, (v, n) in enumerate(zip(mesh.vertices, mesh.normals)):
        cid = int(mesh.chain_id[i])
        if cid < 0 or cid >= len(tables) or cid not in by_chain:
            uncolored.append(i)
            continue
        s = float(mesh.arc_fraction[i])
        center, tangent, radius = chain_point(*tables[cid], s)
        nn = np.linalg.norm(n)
        n_hat = n / nn if nn > 1e-12 else n
        best_q, best_color = 0.0, None
        for curve in by_chain[cid]:
            cam = cam_map.get(curve.camera_id)
            image = images.get(curve.camera_id)
            if cam is None or image is None:
                continue
            to_cam = cam.center - v
            d = float(np.linalg.norm(to_cam))
            if d < 1e-12:
                continue
            v_hat = to_cam / d
            q = max(0.0, float(n_hat @ v_hat)) / (1.0 + d * d)
            if q <= best_q:
                continue
            xy = _curve_sample_point(curve, cam, s, v, center, tangent, radius)
            if xy is None:
                continue
            color = sample_bilinear(image, xy)
            if color is None:
                continue
            best_q, best_color = q, color
        if best_color is None:
            uncolored.append(i)
        else:
            colors[i] = best_color
    report = []
    if uncolored:
        report.append({"kind": "uncolored-vertices", "vertices": uncolored})
    return colors, report


def _curve_sample_point(curve: ImageCurve, cam, s, vertex, center, tangent,
                        radius):
    """Pixel to sample for one vertex on one annotated curve.

    The vertex's offset from the chain centerline, projected on the width
    direction the camera actually sees (tangent x viewing direction), gives
    its fractional thickness; the image point is the curve point at the same
    arc fraction pushed across the curve by that fraction of the half width.
    """
    p2, t2, half_width = curve.at(s)
    to_cam = cam.center - vertex
    d = np.linalg.norm(to_cam)
    if d < 1e-12:
        return None
    width3 = np.cross(tangent, to_cam / d)
    wn = np.linalg.norm(width3)
    if wn < 1e-9 or radius <= 0:
        return p2
    width3 = width3 / wn
    frac_thickness = float(np.clip(((vertex - center) @ width3) / radius, -1.0, 1.0))
    normal2 = np.array([-t2[1], t2[0]])
    # orient the 2D width axis like the 3D one as seen by this camera
    try:
        step = project(cam, center + 1e-3 * radius * width3) - project(cam, center)
    except NonPositiveDepth:
        return None
    if step @ normal2 < 0:
        normal2 = -normal2
    return p2 + frac_thickness * half_width * normal2
