"""Shared helpers for building random cameras and simple scenes."""

import numpy as np

from arbor.camera import Camera, Extrinsics, Intrinsics


def random_rotation(rng):
    """Uniform-ish random rotation via QR of a Gaussian matrix."""
    A = rng.standard_normal((3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q @ np.diag(np.sign(np.diag(R)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_camera(rng, cam_id="cam", width=640, height=480, aligned=True):
    intr = Intrinsics(
        fx=rng.uniform(400, 900),
        fy=rng.uniform(400, 900),
        cx=width / 2 + rng.uniform(-20, 20),
        cy=height / 2 + rng.uniform(-20, 20),
        width=width,
        height=height,
    )
    R = random_rotation(rng)
    t = rng.uniform(-2, 2, size=3)
    return Camera(cam_id, intr, Extrinsics(R, t))


def looking_at_camera(cam_id, position, target, intr=None, down=(0, 1, 0), aligned=True):
    """Camera at `position` with +z toward `target` and image-y roughly along `down`."""
    position = np.asarray(position, dtype=float)
    target = np.asarray(target, dtype=float)
    z = target - position
    z = z / np.linalg.norm(z)
    down = np.asarray(down, dtype=float)
    y = down - np.dot(down, z) * z
    if np.linalg.norm(y) < 1e-9:
        y = np.array([0.0, 0.0, 1.0]) - z * z[2]
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.stack([x, y, z])  # world->camera rows
    t = -R @ position
    if intr is None:
        intr = Intrinsics(fx=800.0, fy=800.0, cx=320.0, cy=240.0, width=640, height=480)
    elif isinstance(intr, dict):
        intr = Intrinsics(**intr)
    return Camera(cam_id, intr, Extrinsics(R, t), aligned=aligned)


def identity_camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=640, height=480, cam_id="id"):
    # principal point must sit inside the sensor, so cx=cy=0 needs origin-corner sensor
    intr = Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
    return Camera(cam_id, intr, Extrinsics(np.eye(3), np.zeros(3)))
