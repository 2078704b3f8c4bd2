"""Colored point clouds and their binary PLY serialization."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloud, InvalidParams


@dataclass
class PointCloud:
    """Positions (N, 3) float and colors (N, 3) float in [0, 1]."""

    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.colors is None:
            self.colors = np.full_like(self.points, 0.5)
        else:
            self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        if len(self.colors) != len(self.points):
            raise InvalidParams("colors and points differ in length")

    def __len__(self) -> int:
        return len(self.points)

    def require_nonempty(self) -> None:
        if len(self.points) == 0:
            raise EmptyCloud("point cloud is empty")


# -- binary ply ----------------------------------------------------------------
# little-endian, xyz as float32, rgb as uint8

_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {count}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
end_header
"""

_POINT = struct.Struct("<fffBBB")


def write_ply(cloud: PointCloud, path) -> None:
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(_PLY_HEADER.format(count=len(cloud)).encode("ascii"))
        for p, c in zip(cloud.points.astype(np.float32), rgb):
            f.write(_POINT.pack(p[0], p[1], p[2], c[0], c[1], c[2]))


def read_ply(path) -> PointCloud:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise InvalidParams("not a ply file")
    header = data[:end].decode("ascii", errors="replace")
    if "binary_little_endian" not in header:
        raise InvalidParams("only binary little-endian ply is supported")
    count = 0
    for line in header.splitlines():
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    body = data[end + len(b"end_header\n"):]
    if len(body) < count * _POINT.size:
        raise InvalidParams("ply body truncated")
    points = np.empty((count, 3))
    colors = np.empty((count, 3))
    for i in range(count):
        x, y, z, r, g, b = _POINT.unpack_from(body, i * _POINT.size)
        points[i] = (x, y, z)
        colors[i] = (r / 255.0, g / 255.0, b / 255.0)
    return PointCloud(points, colors)
