"""Branch annotation data model and the image-space operations built on it.

An annotation is a graph of vertices (pixel position + branch thickness,
optionally a shared keypoint identifier) and edges. Degree-1 vertices are
curve endpoints, degree-2 vertices are curve interiors, and degree-3 vertices
are junctions. Thickness is stored as a *radius* in pixels; every formula in
the toolkit uses that convention.
"""

from __future__ import annotations

import json

from dataclasses import dataclass, field, replace

import numpy as np

from . import camera as cam_mod
from .errors import (
    DimensionMismatch,
    EmptyImage,
    ImageTooSmall,
    InsufficientPoints,
    InvalidAnnotation,
)

CROP_SIZE = 512
MIN_CROP_SEPARATION = 50.0


@dataclass(frozen=True)
class AnnotationVertex:
    id: int
    x: float
    y: float
    thickness: float  # radius in pixels
    keypoint: str | None = None


@dataclass
class ImageAnnotation:
    image_id: str
    camera_id: str
    width: int
    height: int
    vertices: list[AnnotationVertex] = field(default_factory=list)
    edges: list[tuple[int, int]] = field(default_factory=list)

    def vertex_map(self) -> dict[int, AnnotationVertex]:
        return {v.id: v for v in self.vertices}

    def degrees(self) -> dict[int, int]:
        deg = {v.id: 0 for v in self.vertices}
        for a, b in self.edges:
            if a in deg:
                deg[a] += 1
            if b in deg:
                deg[b] += 1
        return deg

    def adjacency(self) -> dict[int, list[int]]:
        adj = {v.id: [] for v in self.vertices}
        for a, b in self.edges:
            if a in adj and b in adj:
                adj[a].append(b)
                adj[b].append(a)
        return adj


@dataclass(frozen=True)
class Violation:
    rule: str
    subject: str
    detail: str

    def __str__(self):
        return f"{self.rule}({self.subject}): {self.detail}"


@dataclass(frozen=True)
class CropSpec:
    center: tuple[int, int]
    size: int
    image_id: str
    mask_id: str


@dataclass(frozen=True)
class SaturationFeature:
    p30: float
    p90: float

    def __post_init__(self):
        if not (0.0 <= self.p30 <= self.p90 <= 1.0):
            raise ValueError(f"percentiles out of order: {self.p30}, {self.p90}")

    def as_array(self) -> np.ndarray:
        return np.array([self.p30, self.p90])


def validate(annotation: ImageAnnotation) -> list[Violation]:
    """Structural check; returns violations as data rather than raising."""
    out: list[Violation] = []
    ids = [v.id for v in annotation.vertices]
    id_set = set(ids)
    if len(ids) != len(id_set):
        seen, dupes = set(), set()
        for i in ids:
            (dupes if i in seen else seen).add(i)
        for i in sorted(dupes):
            out.append(Violation("DuplicateVertexId", f"vertex {i}", "id used more than once"))

    for v in annotation.vertices:
        if v.thickness <= 0:
            out.append(Violation("ThicknessViolation", f"vertex {v.id}",
                                 f"thickness {v.thickness} must be > 0"))
        if not (0 <= v.x < annotation.width and 0 <= v.y < annotation.height):
            out.append(Violation("OutOfBounds", f"vertex {v.id}",
                                 f"({v.x}, {v.y}) outside {annotation.width}x{annotation.height}"))

    keypoints: dict[str, int] = {}
    for v in annotation.vertices:
        if v.keypoint is not None:
            if v.keypoint in keypoints:
                out.append(Violation("DuplicateKeypoint", f"vertex {v.id}",
                                     f"keypoint '{v.keypoint}' also on vertex {keypoints[v.keypoint]}"))
            else:
                keypoints[v.keypoint] = v.id

    seen_edges = set()
    for a, b in annotation.edges:
        if a not in id_set or b not in id_set:
            out.append(Violation("DanglingEdge", f"edge ({a}, {b})", "references a missing vertex"))
            continue
        if a == b:
            out.append(Violation("SelfLoop", f"edge ({a}, {b})", "self loops are not allowed"))
            continue
        key = (min(a, b), max(a, b))
        if key in seen_edges:
            out.append(Violation("DuplicateEdge", f"edge ({a}, {b})", "edge appears twice"))
        seen_edges.add(key)

    for vid, deg in annotation.degrees().items():
        if deg not in (1, 2, 3):
            out.append(Violation("DegreeViolation", f"vertex {vid}",
                                 f"degree {deg} not in {{1, 2, 3}}"))
    return out


# -- rasterization -----------------------------------------------------------

def _segment_coverage(width, height, p0, r0, p1, r1):
    """Pixel-center coverage of one tapered capsule: dist(p, seg) <= lerped radius."""
    rmax = max(r0, r1)
    x_lo = max(0, int(np.floor(min(p0[0], p1[0]) - rmax - 1)))
    x_hi = min(width - 1, int(np.ceil(max(p0[0], p1[0]) + rmax + 1)))
    y_lo = max(0, int(np.floor(min(p0[1], p1[1]) - rmax - 1)))
    y_hi = min(height - 1, int(np.ceil(max(p0[1], p1[1]) + rmax + 1)))
    if x_lo > x_hi or y_lo > y_hi:
        return None
    xs = np.arange(x_lo, x_hi + 1)
    ys = np.arange(y_lo, y_hi + 1)
    gx, gy = np.meshgrid(xs, ys)
    d = np.stack([gx - p0[0], gy - p0[1]], axis=-1).astype(float)
    seg = np.array([p1[0] - p0[0], p1[1] - p0[1]], dtype=float)
    seg2 = float(seg @ seg)
    if seg2 == 0:
        s = np.zeros(gx.shape)
    else:
        s = np.clip((d @ seg) / seg2, 0.0, 1.0)
    closest = s[..., None] * seg
    dist = np.hypot(d[..., 0] - closest[..., 0], d[..., 1] - closest[..., 1])
    radius = (1.0 - s) * r0 + s * r1
    return (slice(y_lo, y_hi + 1), slice(x_lo, x_hi + 1)), dist <= radius


def rasterize_mask(annotation: ImageAnnotation) -> np.ndarray:
    """Render the annotation as a binary uint8 mask (1 = branch).

    Each edge sweeps a capsule whose half-width interpolates the endpoint
    thicknesses linearly along the segment; a pixel is covered when its center
    lies within the local radius (closed boundary rule).
    """
    violations = validate(annotation)
    if violations:
        raise InvalidAnnotation(violations)
    mask = np.zeros((annotation.height, annotation.width), dtype=np.uint8)
    vmap = annotation.vertex_map()
    for a, b in annotation.edges:
        va, vb = vmap[a], vmap[b]
        cov = _segment_coverage(annotation.width, annotation.height,
                                (va.x, va.y), va.thickness, (vb.x, vb.y), vb.thickness)
        if cov is None:
            continue
        window, covered = cov
        mask[window] |= covered.astype(np.uint8)
    return mask


# -- training-crop generation ------------------------------------------------

def gen_crops(image: np.ndarray, mask: np.ndarray, count: int, seed: int,
              image_id: str = "", mask_id: str = "",
              size: int = CROP_SIZE, min_separation: float = MIN_CROP_SEPARATION,
              max_attempts_per_crop: int = 1000) -> list[CropSpec]:
    """Rejection-sample crop centers for a segmentation training set.

    Every crop lies fully inside the image, its mask window contains both
    binary values, and centers are pairwise >= `min_separation` pixels apart.
    Deterministic for a fixed seed; may return fewer than `count` when the
    attempt budget (count * max_attempts_per_crop) runs out.
    """
    h, w = mask.shape[:2]
    if image.shape[:2] != (h, w):
        raise DimensionMismatch(f"image {image.shape[:2]} vs mask {(h, w)}")
    if h < size or w < size:
        raise ImageTooSmall(f"image {w}x{h} smaller than crop size {size}")
    half = size // 2
    # window is [cx-half, cx+half) so valid centers keep it inside the image
    cx_lo, cx_hi = half, w - size + half
    cy_lo, cy_hi = half, h - size + half
    rng = np.random.default_rng(seed)
    mask_bool = mask.astype(bool)
    centers: list[tuple[int, int]] = []
    out: list[CropSpec] = []
    budget = count * max_attempts_per_crop
    while len(out) < count and budget > 0:
        budget -= 1
        cx = int(rng.integers(cx_lo, cx_hi + 1))
        cy = int(rng.integers(cy_lo, cy_hi + 1))
        if any((cx - px) ** 2 + (cy - py) ** 2 < min_separation ** 2 for px, py in centers):
            continue
        window = mask_bool[cy - half: cy - half + size, cx - half: cx - half + size]
        if not (window.any() and not window.all()):
            continue
        centers.append((cx, cy))
        out.append(CropSpec((cx, cy), size, image_id, mask_id))
    return out


def crop_window(spec: CropSpec):
    """(row slice, column slice) selecting the crop from its source image."""
    half = spec.size // 2
    cx, cy = spec.center
    return slice(cy - half, cy - half + spec.size), slice(cx - half, cx - half + spec.size)


# -- saturation features and clustering --------------------------------------

def saturation_channel(image: np.ndarray) -> np.ndarray:
    """HSV saturation in [0,1] from an RGB image (uint8 or float in [0,1])."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 3 or img.shape[2] < 3:
        raise EmptyImage(f"expected RGB image, got shape {img.shape}")
    if img.size == 0:
        raise EmptyImage("zero-pixel image")
    if img.max() > 1.0:
        img = img / 255.0
    mx = img[..., :3].max(axis=2)
    mn = img[..., :3].min(axis=2)
    sat = np.zeros_like(mx)
    nz = mx > 0
    sat[nz] = (mx[nz] - mn[nz]) / mx[nz]
    return sat


def saturation_features(image: np.ndarray) -> SaturationFeature:
    """30th/90th percentile of per-pixel saturation (linear-interpolation percentiles)."""
    sat = saturation_channel(image)
    p30, p90 = np.percentile(sat, [30, 90], method="linear")
    return SaturationFeature(float(p30), float(p90))


def cluster_features(features, k: int = 2, seed: int = 0,
                     tol: float = 1e-9, max_iter: int = 1000):
    """Plain k-means with k-means++ seeding on 2D saturation features.

    Returns (centers (k,2), assignments (n,)). Raises InsufficientPoints when
    there are fewer than k distinct feature points.
    """
    pts = np.array([f.as_array() if isinstance(f, SaturationFeature) else np.asarray(f, dtype=float)
                    for f in features])
    if pts.ndim != 2:
        raise InsufficientPoints("no feature points given")
    distinct = np.unique(pts, axis=0)
    if len(distinct) < k:
        raise InsufficientPoints(f"need >= {k} distinct points, got {len(distinct)}")
    rng = np.random.default_rng(seed)

    # k-means++ initialization
    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(len(pts))]
    for j in range(1, k):
        d2 = np.min(
            ((pts[:, None, :] - centers[None, :j, :]) ** 2).sum(axis=2), axis=1
        )
        total = d2.sum()
        if total == 0:
            # all points coincide with chosen centers; pick an unused distinct point
            remaining = [p for p in distinct if not any(np.array_equal(p, c) for c in centers[:j])]
            centers[j] = remaining[0]
            continue
        centers[j] = pts[rng.choice(len(pts), p=d2 / total)]

    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            sel = assign == j
            if sel.any():
                new_centers[j] = pts[sel].mean(axis=0)
        if np.max(np.linalg.norm(new_centers - centers, axis=1)) <= tol:
            centers = new_centers
            break
        centers = new_centers
    d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    return centers, assign


def kmeans_cost(pts, centers, assign) -> float:
    pts = np.asarray(pts, dtype=float)
    return float(sum(((pts[i] - centers[a]) ** 2).sum() for i, a in enumerate(assign)))


# -- candidate-mask compositing ----------------------------------------------

def neighborhood_features(image: np.ndarray, window: int = 15) -> np.ndarray:
    """(h, w, 2) per-pixel (p30, p90) saturation features over a window
    clamped to the image, so border pixels see a smaller (clipped) window."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and positive")
    sat = saturation_channel(image)
    h, w = sat.shape
    half = window // 2
    padded = np.pad(sat, half, mode="constant", constant_values=np.nan)
    out = np.empty((h, w, 2))
    view = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    # chunk rows: percentile over the window axes copies, so bound the working set
    rows_per_chunk = max(1, int(4e6 // (w * window * window)) or 1)
    for y0 in range(0, h, rows_per_chunk):
        y1 = min(h, y0 + rows_per_chunk)
        block = view[y0:y1]
        q = np.nanpercentile(block, [30, 90], axis=(2, 3), method="linear")
        out[y0:y1, :, 0] = q[0]
        out[y0:y1, :, 1] = q[1]
    return out


def composite_masks(mask_a: np.ndarray, mask_b: np.ndarray, image: np.ndarray,
                    centers: np.ndarray, window: int = 15) -> np.ndarray:
    """Blend two candidate masks with per-pixel weights from saturation features.

    w = d_b / (d_a + d_b) where d_a, d_b are distances from the pixel's
    neighborhood feature to cluster centers (a pixel matching center A takes
    mask A fully). Output is float in [0, 1].
    """
    if mask_a.shape != mask_b.shape or mask_a.shape != image.shape[:2]:
        raise DimensionMismatch(
            f"masks {mask_a.shape}/{mask_b.shape} and image {image.shape[:2]} must match")
    centers = np.asarray(centers, dtype=float)
    feats = neighborhood_features(image, window)
    da = np.linalg.norm(feats - centers[0], axis=2)
    db = np.linalg.norm(feats - centers[1], axis=2)
    total = da + db
    w = np.where(total > 0, db / np.where(total > 0, total, 1.0), 0.5)
    a = mask_a.astype(float)
    b = mask_b.astype(float)
    if a.max() > 1:
        a = a / 255.0
    if b.max() > 1:
        b = b / 255.0
    return w * a + (1.0 - w) * b


# -- stereo epipolar transfer --------------------------------------------------

@dataclass
class EpipolarDraft:
    annotation: ImageAnnotation
    lines: dict[int, np.ndarray]  # vertex id -> (a, b, c) line in the target image

    def slide(self, vertex_id: int, s: float) -> np.ndarray:
        """Position on the vertex's epipolar line at signed arc offset s from the draft point."""
        a, b, _ = self.lines[vertex_id]
        d = np.array([-b, a])
        d = d / np.linalg.norm(d)
        v = self.annotation.vertex_map()[vertex_id]
        return np.array([v.x, v.y]) + s * d


def epipolar_transfer(annotation: ImageAnnotation, cam1, cam2) -> EpipolarDraft:
    """Copy an annotation into a stereo partner image, constrained to epipolar lines.

    Each vertex starts at the closest point on its epipolar line to the source
    position; topology and thicknesses transfer verbatim.
    """
    F = cam_mod.fundamental_matrix(cam1, cam2)
    new_vertices = []
    lines: dict[int, np.ndarray] = {}
    for v in annotation.vertices:
        line = cam_mod.epipolar_line(F, (v.x, v.y))
        lines[v.id] = line
        p = cam_mod.closest_point_on_line(line, (v.x, v.y))
        new_vertices.append(replace(v, x=float(p[0]), y=float(p[1])))
    draft = ImageAnnotation(
        image_id=annotation.image_id + "@stereo",
        camera_id=cam2.id,
        width=cam2.intrinsics.width,
        height=cam2.intrinsics.height,
        vertices=new_vertices,
        edges=list(annotation.edges),
    )
    return EpipolarDraft(draft, lines)


# -- json ----------------------------------------------------------------------

def annotation_to_dict(annotation: ImageAnnotation) -> dict:
    return {
        "image_id": annotation.image_id,
        "camera_id": annotation.camera_id,
        "width": annotation.width,
        "height": annotation.height,
        "vertices": [
            {"id": v.id, "x": v.x, "y": v.y, "thickness": v.thickness,
             "keypoint": v.keypoint}
            for v in annotation.vertices
        ],
        "edges": [[int(a), int(b)] for a, b in annotation.edges],
    }


def annotation_from_dict(data: dict) -> ImageAnnotation:
    vertices = [
        AnnotationVertex(int(v["id"]), float(v["x"]), float(v["y"]),
                         float(v["thickness"]), v.get("keypoint"))
        for v in data["vertices"]
    ]
    edges = [(int(a), int(b)) for a, b in data["edges"]]
    return ImageAnnotation(str(data["image_id"]), str(data["camera_id"]),
                           int(data["width"]), int(data["height"]),
                           vertices, edges)


def write_annotation(annotation: ImageAnnotation, path) -> None:
    with open(path, "w") as f:
        json.dump(annotation_to_dict(annotation), f, indent=2)


def read_annotation(path) -> ImageAnnotation:
    with open(path) as f:
        return annotation_from_dict(json.load(f))
