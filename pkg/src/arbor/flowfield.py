"""Directional kernel bank, multiscale activations, and flow extraction.

A segmentation mask is convolved with a bank of oriented, scale-aware
kernels; per-pixel activation histograms over the kernel angles are then
clustered into blocks whose weighted direction sums become the pixel's
principal flow directions (at most two).

The kernels are bidirectional: an angle theta and theta + 180 degrees denote
the same filter, so the bank spans [0, 180) only.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import EmptyMask, InvalidParams

# r and sigma presets: experiments quote the first set, the kernel figure
# quotes the second; both ship, the first is the default.
PRESET_EXPERIMENT = {"r": 4.0, "sigma": 1.8}
PRESET_PRACTICE = {"r": 3.8, "sigma": 0.8}

DEFAULT_N = 35
DEFAULT_ANGLES_DEG = tuple(range(0, 180, 10))
DEFAULT_SCALES = (1.0, 2.0 ** -0.5, 0.5, 2.0 ** -1.5, 0.25)
DEFAULT_THRESHOLD = 0.25  # fraction of the stack's global max activation


def kernel_value(px, py, theta, r, sigma, falloff_radius=None):
    """Continuous kernel formula at point p = (px, py).

    w = 1 - |p| / r (linear falloff, negative far from the center),
    d = |p - (p . v)v| / r (scaled distance from the line along theta), and

        k = w cos(d pi / 2)              d < 1
          = -(w / sigma) sin((d - 1) pi / sigma)   1 <= d < 1 + sigma
          = 0                            otherwise

    Both the d = 1 and d = 1 + sigma boundaries are continuous (the adjacent
    branches agree at 0). `falloff_radius` substitutes a wider normalization
    in w; the default keeps the verbatim w = 1 - |p| / r.
    """
    if falloff_radius is None:
        falloff_radius = r
    norm = math.hypot(px, py)
    w = 1.0 - norm / falloff_radius
    c, s = math.cos(theta), math.sin(theta)
    along = px * c + py * s
    dx, dy = px - along * c, py - along * s
    d = math.hypot(dx, dy) / r
    if d < 1.0:
        return w * math.cos(d * math.pi / 2.0)
    if d < 1.0 + sigma:
        return -(w / sigma) * math.sin((d - 1.0) * math.pi / sigma)
    return 0.0


@dataclass(frozen=True)
class DirectionalKernel:
    theta: float  # radians
    r: float
    sigma: float
    N: int
    weights: np.ndarray  # (N, N), index [j, i] is p = (i - N//2, j - N//2)

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta)


def make_kernel(theta, r=4.0, sigma=1.8, N=DEFAULT_N, falloff_radius=None) -> DirectionalKernel:
    """Sample the kernel formula on the centered discrete grid {-N//2 .. N//2}^2."""
    if r <= 0 or sigma <= 0:
        raise InvalidParams(f"r and sigma must be positive, got r={r}, sigma={sigma}")
    if N < 1 or N % 2 == 0:
        raise InvalidParams(f"N must be odd and positive, got {N}")
    half = N // 2
    coords = np.arange(-half, half + 1, dtype=float)
    gx, gy = np.meshgrid(coords, coords)
    fr = r if falloff_radius is None else falloff_radius
    w = 1.0 - np.hypot(gx, gy) / fr
    c, s = math.cos(theta), math.sin(theta)
    along = gx * c + gy * s
    d = np.hypot(gx - along * c, gy - along * s) / r
    k = np.zeros_like(w)
    near = d < 1.0
    mid = (d >= 1.0) & (d < 1.0 + sigma)
    k[near] = w[near] * np.cos(d[near] * np.pi / 2.0)
    k[mid] = -(w[mid] / sigma) * np.sin((d[mid] - 1.0) * np.pi / sigma)
    return DirectionalKernel(theta, r, sigma, N, k)


def make_bank(r=4.0, sigma=1.8, N=DEFAULT_N, angles_deg=DEFAULT_ANGLES_DEG,
              falloff_radius=None) -> list[DirectionalKernel]:
    """18 kernels 10 degrees apart by default; 180 would repeat 0, so stop at 170."""
    return [make_kernel(math.radians(a), r, sigma, N, falloff_radius) for a in angles_deg]


def grid_corner_radius(N=DEFAULT_N) -> float:
    """Falloff radius reaching the grid corners, so w stays nonnegative.

    With the verbatim w = 1 - |p| / r and r of a few pixels, most of the grid
    carries negative weight and a kernel aligned with a long branch responds
    negatively, inverting orientation selection. Normalizing the falloff by
    the grid radius instead keeps aligned responses maximal; pass this value
    as `falloff_radius` when the bank feeds flow extraction.
    """
    return (N // 2) * math.sqrt(2.0)


# -- deterministic resampling -------------------------------------------------

def resize_bilinear(grid: np.ndarray, factor: float) -> np.ndarray:
    """Downscale with pixel-center alignment: output center (i + .5) / factor - .5."""
    h, w = grid.shape
    oh = max(1, int(round(h * factor)))
    ow = max(1, int(round(w * factor)))
    if (oh, ow) == (h, w):
        return grid.astype(float, copy=True)
    ys = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g = grid.astype(float)
    top = g[np.ix_(y0, x0)] * (1 - fx) + g[np.ix_(y0, x1)] * fx
    bot = g[np.ix_(y1, x0)] * (1 - fx) + g[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def upsample_nearest(grid: np.ndarray, shape) -> np.ndarray:
    """Nearest-neighbor with pixel-center alignment back to a reference shape."""
    h, w = grid.shape
    oh, ow = shape
    if (oh, ow) == (h, w):
        return grid.copy()
    ys = np.minimum(((np.arange(oh) + 0.5) * (h / oh)).astype(int), h - 1)
    xs = np.minimum(((np.arange(ow) + 0.5) * (w / ow)).astype(int), w - 1)
    return grid[np.ix_(ys, xs)]


# -- activations ---------------------------------------------------------------

@dataclass
class ActivationStack:
    activations: np.ndarray  # (num_scales, num_angles, H, W), reference resolution
    angles: np.ndarray       # radians, sorted ascending in [0, pi)
    scales: tuple


def _worker_count() -> int:
    env = os.environ.get("ARBOR_THREADS", "")
    if env.strip():
        try:
            n = int(env)
        except ValueError:
            raise InvalidParams(f"ARBOR_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise InvalidParams(f"ARBOR_THREADS must be >= 1, got {n}")
        return n
    return min(4, os.cpu_count() or 1)


def directional_activations(mask: np.ndarray, bank=None, scales=DEFAULT_SCALES) -> ActivationStack:
    """Convolve the mask with every kernel at every scale (zero padding).

    Downscaling is bilinear, the activation grids are brought back to the
    mask's resolution with nearest-neighbor upsampling, so all grids share
    one reference frame. The kernels are even under p -> -p, which makes
    convolution and correlation identical here.
    """
    mask = np.asarray(mask)
    if mask.size == 0 or mask.ndim != 2:
        raise EmptyMask(f"need a nonempty 2-D mask, got shape {mask.shape}")
    if bank is None:
        bank = make_bank()
    for f in scales:
        if not (0.0 < f <= 1.0):
            raise InvalidParams(f"scale factors must be in (0, 1], got {f}")
    base = (mask > 0).astype(float)
    h, w = base.shape
    kernels = np.stack([k.weights for k in bank])  # (A, N, N)
    out = np.empty((len(scales), len(bank), h, w))

    def run_scale(si):
        small = resize_bilinear(base, scales[si])
        tiled = np.broadcast_to(small[None, :, :], (len(bank),) + small.shape)
        acts = fftconvolve(tiled, kernels, mode="same", axes=(1, 2))
        for ai in range(len(bank)):
            out[si, ai] = upsample_nearest(acts[ai], (h, w))

    workers = min(_worker_count(), len(scales))
    if workers <= 1:
        for si in range(len(scales)):
            run_scale(si)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_scale, range(len(scales))))
    angles = np.array([k.theta for k in bank])
    return ActivationStack(out, angles, tuple(scales))


# -- flow extraction -----------------------------------------------------------

@dataclass
class FlowField:
    count: np.ndarray    # (H, W) uint8, 0..2
    vectors: np.ndarray  # (H, W, 2, 2) float32; [y, x, k] is the k-th (dx, dy)

    @property
    def shape(self):
        return self.count.shape

    def directions_at(self, x: int, y: int) -> np.ndarray:
        n = int(self.count[y, x])
        return np.array(self.vectors[y, x, :n], dtype=float)


def _circular_blocks(hist):
    """Split an 18-bin circular histogram into nonzero runs, then at strict
    interior local minima (the minimum sample closes the block on its left).
    Returns a list of (start_index, length)."""
    n = len(hist)
    nz = [v > 0 for v in hist]
    if not any(nz):
        return []
    if all(nz):
        # no zero anchor (cannot happen after the blob rule); treat the global
        # minimum as the boundary, it joins the block on its left
        runs = [((int(np.argmin(hist)) + 1) % n, n)]
    else:
        first_zero = nz.index(False)
        runs = []
        start, length = None, 0
        for j in range(n):
            i = (first_zero + j) % n
            if nz[i]:
                if start is None:
                    start = i
                    length = 0
                length += 1
            elif start is not None:
                runs.append((start, length))
                start, length = None, 0
        if start is not None:
            runs.append((start, length))
    blocks = []
    for start, length in runs:
        seg_start = start
        seg_len = 1
        for j in range(1, length):
            i = (start + j) % n
            prev = hist[(i - 1) % n]
            nxt = hist[(i + 1) % n]
            interior = j < length - 1
            if interior and hist[i] < prev and hist[i] < nxt:
                blocks.append((seg_start, seg_len + 1))  # minimum joins the left block
                seg_start = (i + 1) % n
                seg_len = 0
            else:
                seg_len += 1
        if seg_len:
            blocks.append((seg_start, seg_len))
    return blocks


def extract_flow(stack: ActivationStack, threshold=DEFAULT_THRESHOLD,
                 relative=True) -> FlowField:
    """Threshold, reduce over scales by max, and cluster angle histograms.

    Pixels whose histograms are all zero, or nonzero in more than half the
    bins (isotropic blobs), carry no flow. Each remaining histogram is split
    into circularly contiguous blocks bounded by local minima; a block with
    per-angle activations a contributes the vector sum(a * (cos, sin)), where
    angles past a 170 -> 0 degree wrap continue unwrapped (+180 degrees) so
    adjacent bidirectional samples reinforce rather than cancel. The top two
    block vectors by magnitude are kept.
    """
    A = stack.activations
    thr = threshold * float(A.max()) if relative else float(threshold)
    M = np.maximum(np.where(A >= thr, A, 0.0).max(axis=0), 0.0)
    num_angles, h, w = M.shape
    nz_count = (M > 0).sum(axis=0)
    keep = (nz_count > 0) & (nz_count * 2 <= num_angles)
    count = np.zeros((h, w), dtype=np.uint8)
    vectors = np.zeros((h, w, 2, 2), dtype=np.float32)
    step = math.pi / num_angles  # bank spacing in radians
    base_angles = stack.angles
    ys, xs = np.nonzero(keep)
    hists = M[:, ys, xs]
    for idx in range(len(ys)):
        hist = hists[:, idx].tolist()
        cands = []
        for start, length in _circular_blocks(hist):
            vx = vy = 0.0
            for j in range(length):
                i = (start + j) % num_angles
                ang = base_angles[start] + j * step  # unwrapped past 170 -> 0
                a = hist[i]
                vx += a * math.cos(ang)
                vy += a * math.sin(ang)
            if vy < 0 or (vy == 0 and vx < 0):
                vx, vy = -vx, -vy  # bidirectional: fold to the upper half-plane
            mag = math.hypot(vx, vy)
            if mag > 0:
                cands.append((mag, start, vx, vy))
        cands.sort(key=lambda c: (-c[0], c[1]))
        y, x = ys[idx], xs[idx]
        n = min(2, len(cands))
        count[y, x] = n
        for k in range(n):
            vectors[y, x, k, 0] = cands[k][2]
            vectors[y, x, k, 1] = cands[k][3]
    return FlowField(count, vectors)


def compute_flow(mask, bank=None, scales=DEFAULT_SCALES,
                 threshold=DEFAULT_THRESHOLD, relative=True) -> FlowField:
    """Mask to flow field in one call."""
    return extract_flow(directional_activations(mask, bank, scales), threshold, relative)


# -- binary flow file ----------------------------------------------------------

MAGIC = b"FFLD"
VERSION = 1


def write_flow(flow: FlowField, path) -> None:
    with open(path, "wb") as f:
        f.write(flow_to_bytes(flow))


def flow_payload(flow: FlowField) -> bytes:
    h, w = flow.shape
    out = bytearray()
    counts = flow.count
    vecs = flow.vectors
    for y in range(h):
        for x in range(w):
            n = int(counts[y, x])
            out.append(n)
            for k in range(n):
                out += struct.pack("<ff", float(vecs[y, x, k, 0]), float(vecs[y, x, k, 1]))
    return bytes(out)


def flow_to_bytes(flow: FlowField) -> bytes:
    h, w = flow.shape
    return MAGIC + struct.pack("<III", VERSION, w, h) + flow_payload(flow)


def read_flow(path_or_bytes) -> FlowField:
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as f:
            data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}")
    version, w, h = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    count = np.zeros((h, w), dtype=np.uint8)
    vectors = np.zeros((h, w, 2, 2), dtype=np.float32)
    pos = 16
    for y in range(h):
        for x in range(w):
            n = data[pos]
            pos += 1
            if n > 2:
                raise ValueError(f"pixel ({x}, {y}) claims {n} vectors")
            for k in range(n):
                dx, dy = struct.unpack_from("<ff", data, pos)
                pos += 8
                vectors[y, x, k] = (dx, dy)
            count[y, x] = n
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes")
    return FlowField(count, vectors)


# -- visualization ---------------------------------------------------------------

def flow_to_hsv_image(flow: FlowField) -> np.ndarray:
    """Debug rendering: hue = primary direction angle (mod 180 degrees),
    value = magnitude relative to the field max, saturation 1. uint8 RGB."""
    h, w = flow.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    has = flow.count > 0
    if not has.any():
        return rgb
    vx = flow.vectors[..., 0, 0].astype(float)
    vy = flow.vectors[..., 0, 1].astype(float)
    mag = np.hypot(vx, vy)
    vmax = mag.max()
    ang = np.mod(np.arctan2(vy, vx), math.pi)  # bidirectional: fold to [0, pi)
    hue = ang / math.pi  # [0, 1)
    val = mag / vmax if vmax > 0 else mag
    # manual HSV -> RGB with s = 1
    i = np.floor(hue * 6).astype(int) % 6
    f = hue * 6 - np.floor(hue * 6)
    p = np.zeros_like(val)
    q = val * (1 - f)
    t = val * f
    lut = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)]
    out = np.zeros((h, w, 3))
    for sector, (r, g, b) in enumerate(lut):
        sel = (i == sector) & has
        out[sel, 0] = r[sel]
        out[sel, 1] = g[sel]
        out[sel, 2] = b[sel]
    rgb[...] = np.clip(out * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return rgb
