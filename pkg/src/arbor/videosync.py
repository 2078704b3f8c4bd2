"""Synchronize two video feeds by cross-correlating per-frame motion magnitudes.

Each feed is reduced to a series of L1 distances between adjacent grayscale
frames; the integer offset maximizing normalized cross-correlation over the
overlap aligns the feeds. Residual temporal error is bounded by 1/(2*fps).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptySeries, TooFewFrames

# ITU-R BT.601 luma weights, used for all RGB->gray conversion here
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class MotionSeries:
    values: np.ndarray  # (frame_count - 1,) L1 distances, all >= 0
    fps: float = 30.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("motion series must be one-dimensional")
        if np.any(v < 0):
            raise ValueError("motion magnitudes must be non-negative")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    """Collapse an RGB frame to grayscale with the standard luma weighting."""
    f = np.asarray(frame, dtype=float)
    if f.ndim == 2:
        return f
    if f.ndim == 3 and f.shape[2] in (3, 4):
        w = np.array(LUMA_WEIGHTS)
        return f[..., :3] @ w
    raise DimensionMismatch(f"unsupported frame shape {f.shape}")


def frame_diff_sequence(frames, fps: float = 30.0) -> MotionSeries:
    """Sum of absolute per-pixel differences between each pair of adjacent frames."""
    frames = list(frames)
    if len(frames) < 2:
        raise TooFewFrames(f"need >= 2 frames, got {len(frames)}")
    gray = [to_grayscale(f) for f in frames]
    shape = gray[0].shape
    for i, g in enumerate(gray):
        if g.shape != shape:
            raise DimensionMismatch(f"frame {i} has shape {g.shape}, expected {shape}")
    values = np.array(
        [float(np.sum(np.abs(gray[i + 1] - gray[i]))) for i in range(len(gray) - 1)]
    )
    return MotionSeries(values, fps)


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean, unit-variance correlation; 0 when either window is constant."""
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def best_offset(a: MotionSeries, b: MotionSeries, max_lag: int) -> int:
    """Integer lag k maximizing NCC of b against a shifted forward by k.

    Positive k means feed b lags feed a by k frames (b[t] ~ a[t-k]).
    Ties break toward smaller |lag|, then toward the smaller lag.
    """
    if len(a) == 0 or len(b) == 0:
        raise EmptySeries("both motion series must be non-empty")
    if max_lag >= min(len(a), len(b)):
        raise ValueError("max_lag must be smaller than the shorter series")
    va, vb = a.values, b.values
    best = None
    for lag in sorted(range(-max_lag, max_lag + 1), key=lambda k: (abs(k), k)):
        # overlap: compare a[i] with b[i + lag]
        lo_a = max(0, -lag)
        hi_a = min(len(va), len(vb) - lag)
        if hi_a - lo_a < 2:
            continue
        score = _ncc(va[lo_a:hi_a], vb[lo_a + lag: hi_a + lag])
        if best is None or score > best[0] + 1e-15:
            best = (score, lag)
    if best is None:
        raise EmptySeries("no overlapping window for any lag")
    return best[1]
