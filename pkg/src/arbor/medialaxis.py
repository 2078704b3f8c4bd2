"""Medial-axis tracing by alternating projection and advection on a flow field.

A point with flow direction n is projected onto the branch centerline by
probing the line through it perpendicular to n: the maximal contiguous run
whose flow stays within a cone of n is the local cross-section, its midpoint
the medial-axis vertex, its length the branch thickness. The trace then steps
along the flow, optionally attracted toward a labeler-given far endpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConeMismatch, NoFlowAtPoint, NoFlowAtStart, ZeroFlow
from .flowfield import FlowField

TERMINATION_ZERO_FLOW = "zero-flow"
TERMINATION_REACHED = "reached-endpoint"
TERMINATION_MAX_STEPS = "max-steps"


@dataclass(frozen=True)
class TraceParams:
    step: float = 2.0
    cone_deg: float = 15.0
    max_steps: int = 2000
    max_probe: float = 16.0  # 4x the default kernel thickness parameter
    probe_spacing: float = 0.5
    bisection_iters: int = 25

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if not (0.0 < self.cone_deg < 90.0):
            raise ValueError(f"cone must be in (0, 90) degrees, got {self.cone_deg}")
        if self.max_steps <= 0:
            raise ValueError(f"max_steps must be positive, got {self.max_steps}")


@dataclass
class MedialAxisPolyline:
    points: np.ndarray       # (n, 2) float
    thicknesses: np.ndarray  # (n,) float
    termination: str

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.thicknesses = np.asarray(self.thicknesses, dtype=float).reshape(-1)
        if len(self.points) != len(self.thicknesses):
            raise ValueError("points and thicknesses lengths differ")


def _unit(v):
    v = np.asarray(v, dtype=float)
    norm = float(np.hypot(v[0], v[1]))
    if norm == 0:
        raise ValueError("zero direction")
    return v / norm


def _pixel_indicator(flow: FlowField, ix: int, iy: int, n, cos_cone: float) -> float:
    """1.0 when any stored direction at the pixel is within the cone of +-n."""
    h, w = flow.shape
    if not (0 <= ix < w and 0 <= iy < h):
        return 0.0
    c = int(flow.count[iy, ix])
    for k in range(c):
        dx, dy = flow.vectors[iy, ix, k]
        mag = math.hypot(dx, dy)
        if mag == 0:
            continue
        if abs(dx * n[0] + dy * n[1]) / mag >= cos_cone:
            return 1.0
    return 0.0


def _cone_indicator(flow: FlowField, x: float, y: float, n, cos_cone: float) -> float:
    """Bilinear interpolation of the per-pixel cone indicator; out of bounds is 0."""
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    v00 = _pixel_indicator(flow, x0, y0, n, cos_cone)
    v10 = _pixel_indicator(flow, x0 + 1, y0, n, cos_cone)
    v01 = _pixel_indicator(flow, x0, y0 + 1, n, cos_cone)
    v11 = _pixel_indicator(flow, x0 + 1, y0 + 1, n, cos_cone)
    return (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy


def _nearest_pixel(flow: FlowField, p):
    h, w = flow.shape
    ix = min(max(int(round(p[0])), 0), w - 1)
    iy = min(max(int(round(p[1])), 0), h - 1)
    return ix, iy


def _run_end(flow, p, m, n, cos_cone, params) -> float:
    """Signed extent of the cone-consistent run from p along unit m (>= 0)."""
    inside = 0.0
    s = params.probe_spacing
    while s <= params.max_probe:
        q = (p[0] + s * m[0], p[1] + s * m[1])
        if _cone_indicator(flow, q[0], q[1], n, cos_cone) >= 0.5:
            inside = s
            s += params.probe_spacing
        else:
            lo, hi = inside, s
            for _ in range(params.bisection_iters):
                mid = 0.5 * (lo + hi)
                q = (p[0] + mid * m[0], p[1] + mid * m[1])
                if _cone_indicator(flow, q[0], q[1], n, cos_cone) >= 0.5:
                    lo = mid
                else:
                    hi = mid
            return lo
    return params.max_probe


def project_to_axis(p, n, flow: FlowField, params: TraceParams = TraceParams()):
    """Project p onto the medial axis along the line perpendicular to n.

    Returns (p_prime, thickness): the midpoint of the maximal contiguous run
    whose (bilinearly interpolated) cone indicator stays at or above 0.5, and
    the run's length. Runs are cut at max_probe.
    """
    p = np.asarray(p, dtype=float)
    n = _unit(n)
    cos_cone = math.cos(math.radians(params.cone_deg))
    ix, iy = _nearest_pixel(flow, p)
    if flow.count[iy, ix] == 0:
        raise NoFlowAtPoint(f"no flow at pixel ({ix}, {iy})")
    if _pixel_indicator(flow, ix, iy, n, cos_cone) == 0.0:
        raise ConeMismatch(f"no direction within {params.cone_deg} deg of n at ({ix}, {iy})")
    m = np.array([-n[1], n[0]])
    s_pos = _run_end(flow, p, m, n, cos_cone, params)
    s_neg = _run_end(flow, p, -m, n, cos_cone, params)
    a = p - s_neg * m
    b = p + s_pos * m
    return (a + b) / 2.0, float(s_pos + s_neg)


def _flow_axis(flow: FlowField, p, n_prev):
    """Stored direction at p's nearest pixel closest to n_prev, sign-resolved.

    Directions are axes (a filter cannot tell n from -n), so each candidate is
    flipped to have a nonnegative dot with n_prev before comparison.
    """
    p = np.asarray(p, dtype=float)
    ix, iy = _nearest_pixel(flow, p)
    c = int(flow.count[iy, ix])
    if c == 0:
        raise ZeroFlow(f"zero flow at pixel ({ix}, {iy})")
    best, best_dot = None, -2.0
    for k in range(c):
        v = np.asarray(flow.vectors[iy, ix, k], dtype=float)
        mag = math.hypot(v[0], v[1])
        if mag == 0:
            continue
        d = v / mag
        dot = float(d @ n_prev)
        if dot < 0:
            d, dot = -d, -dot
        if dot > best_dot:
            best, best_dot = d, dot
    if best is None:
        raise ZeroFlow(f"only zero vectors stored at pixel ({ix}, {iy})")
    return best


def advect_step(p_prime, n_prev, flow: FlowField, params: TraceParams = TraceParams(),
                target=None):
    """Pick the next travel direction at p_prime and step along it.

    Stored directions are sign-resolved toward n_prev and the closest one
    wins. With a (p0, p1) target pair the flow direction is blended with the
    attraction toward p1: n' = normalize(w * n_f + (1 - w) * n_d) where
    w = clamp(|p' - p1| / |p0 - p1|, 0, 1), so attraction takes over as the
    trace approaches the far endpoint.
    """
    p_prime = np.asarray(p_prime, dtype=float)
    n_prev = _unit(n_prev)
    n_new = _flow_axis(flow, p_prime, n_prev)
    if target is not None:
        p0, p1 = (np.asarray(t, dtype=float) for t in target)
        span = float(np.linalg.norm(p0 - p1))
        if span > 0:
            w = min(max(float(np.linalg.norm(p_prime - p1)) / span, 0.0), 1.0)
            to_p1 = p1 - p_prime
            dist = float(np.linalg.norm(to_p1))
            if dist > 0:
                blend = w * n_new + (1.0 - w) * (to_p1 / dist)
                norm = float(np.linalg.norm(blend))
                n_new = blend / norm if norm > 1e-12 else to_p1 / dist
    return n_new, p_prime + params.step * n_new


def trace(flow: FlowField, p0, p1=None, params: TraceParams = TraceParams()) -> MedialAxisPolyline:
    """Alternate projection and advection from p0, optionally guided to p1.

    The cone axis handed to each projection is always a stored flow direction
    (the one closest to the previous axis); with a target the blended
    direction only decides where the next sample point lands. On arrival the
    target's own projection is emitted as the final vertex, so forward and
    reverse traces cover the same span.
    """
    p0 = np.asarray(p0, dtype=float)
    ix, iy = _nearest_pixel(flow, p0)
    if flow.count[iy, ix] == 0:
        raise NoFlowAtStart(f"no flow at start pixel ({ix}, {iy})")
    v = np.asarray(flow.vectors[iy, ix, 0], dtype=float)
    n = _unit(v)
    if p1 is not None:
        p1 = np.asarray(p1, dtype=float)
        if float(n @ (p1 - p0)) < 0:
            n = -n
    target = (p0.copy(), p1) if p1 is not None else None
    points, thicknesses = [], []
    termination = TERMINATION_MAX_STEPS
    p = p0
    for _ in range(params.max_steps):
        try:
            p_prime, thickness = project_to_axis(p, n, flow, params)
        except (NoFlowAtPoint, ConeMismatch):
            termination = TERMINATION_ZERO_FLOW
            break
        points.append(p_prime)
        thicknesses.append(thickness)
        if p1 is not None and float(np.linalg.norm(p_prime - p1)) <= params.step:
            termination = TERMINATION_REACHED
            try:
                axis = _flow_axis(flow, p1, n)
                q, q_thick = project_to_axis(p1, axis, flow, params)
            except (ZeroFlow, NoFlowAtPoint, ConeMismatch):
                break
            if float(np.linalg.norm(q - p_prime)) > 1e-9:
                points.append(q)
                thicknesses.append(q_thick)
            break
        try:
            _, p = advect_step(p_prime, n, flow, params, target)
            n = _flow_axis(flow, p_prime, n)
        except ZeroFlow:
            termination = TERMINATION_ZERO_FLOW
            break
    return MedialAxisPolyline(np.array(points).reshape(-1, 2),
                              np.array(thicknesses), termination)


def resample_by_arc_length(polyline: MedialAxisPolyline, count: int) -> np.ndarray:
    """Uniform arc-length resampling of the polyline's points, (count, 2)."""
    pts = polyline.points
    if len(pts) == 0:
        return np.zeros((0, 2))
    if len(pts) == 1:
        return np.repeat(pts, count, axis=0)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total == 0:
        return np.repeat(pts[:1], count, axis=0)
    targets = np.linspace(0.0, total, count)
    out = np.empty((count, 2))
    out[:, 0] = np.interp(targets, s, pts[:, 0])
    out[:, 1] = np.interp(targets, s, pts[:, 1])
    return out
