"""Cameras, projection matrices and depth-space conversions.

Conventions used throughout the package:

* Image arrays are indexed ``[row, col]``; continuous pixel coordinates put the
  centre of pixel ``(x, y)`` at ``(x + 0.5, y + 0.5)``.
* Poses are world-to-camera in the usual computer-vision frame (x right, y down,
  z forward), as stored by COLMAP.
* Rendering happens in the OpenGL camera frame (x right, y up, z backward).  The
  two frames differ by ``FLIP_YZ = diag(1, -1, -1)``.  Linear depth is the
  positive distance along the optical axis, i.e. ``-z`` in the OpenGL frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FLIP_YZ = np.diag([1.0, -1.0, -1.0, 1.0])


class DepthRangeError(ValueError):
    """Raised when a depth lies outside the near/far range of a projection."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 2 or self.height < 2:
            raise ValueError("image must be at least 2x2 pixels")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def quaternion_to_matrix(qw, qx, qy, qz) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; the quaternion is normalised first."""
    q = np.array([qw, qx, qy, qz], dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise ValueError("degenerate quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quaternion_to_matrix`, returning ``qw >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform ``x_cam = R @ x_world + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a proper rotation")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, q, t) -> "Pose":
        return cls(quaternion_to_matrix(*q), t)

    @property
    def quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.R)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t


@dataclass(frozen=True)
class View:
    """A posed camera.  ``image`` is an ``(H, W, 3)`` array in [0, 1] or None."""

    id: int
    intrinsics: Intrinsics
    pose: Pose
    image: np.ndarray | None = field(default=None, repr=False, compare=False)
    image_path: str | None = None

    def __post_init__(self):
        if self.image is not None:
            img = np.asarray(self.image)
            if img.shape != (self.intrinsics.height, self.intrinsics.width, 3):
                raise ValueError(
                    f"view {self.id}: image shape {img.shape} does not match intrinsics "
                    f"{self.intrinsics.width}x{self.intrinsics.height}"
                )


def projection_from_intrinsics(c: Intrinsics, near: float, far: float) -> np.ndarray:
    """OpenGL-style 4x4 projection matrix for pinhole intrinsics.

    NDC depth increases with distance: ``near -> -1`` and ``far -> +1``.
    """
    if not near > 0:
        raise ValueError(f"near must be positive, got {near}")
    if not far > near:
        raise ValueError(f"far ({far}) must exceed near ({near})")
    W, H = c.width, c.height
    P = np.zeros((4, 4))
    P[0, 0] = 2.0 * c.fx / W
    P[0, 2] = 1.0 - 2.0 * c.cx / W
    P[1, 1] = -2.0 * c.fy / H
    P[1, 2] = 1.0 - 2.0 * c.cy / H
    P[2, 2] = -(far + near) / (far - near)
    P[2, 3] = -2.0 * far * near / (far - near)
    P[3, 2] = -1.0
    return P


def near_far(P: np.ndarray) -> tuple[float, float]:
    """Recover ``(near, far)`` from a matrix built by :func:`projection_from_intrinsics`."""
    a, b = P[2, 2], P[2, 3]
    return b / (a - 1.0), b / (a + 1.0)


def to_reciprocal(z, near: float, far: float):
    """Linear depth (metres) to NDC depth in [-1, 1]."""
    z = np.asarray(z, dtype=float)
    if np.any(~(z >= near)) or np.any(~(z <= far)):
        raise DepthRangeError(f"depth outside [{near}, {far}]")
    return ((far + near) - 2.0 * far * near / z) / (far - near)


def to_linear(zr, near: float, far: float):
    """NDC depth in [-1, 1] to linear depth (metres); exact inverse of :func:`to_reciprocal`."""
    zr = np.asarray(zr, dtype=float)
    if np.any(~(zr >= -1.0)) or np.any(~(zr <= 1.0)):
        raise DepthRangeError("NDC depth outside [-1, 1]")
    return 2.0 * far * near / ((far + near) - zr * (far - near))


def depth_reciprocal_convert(z, P: np.ndarray, direction: str = "to-reciprocal"):
    near, far = near_far(P)
    if direction == "to-reciprocal":
        return to_reciprocal(z, near, far)
    if direction == "to-linear":
        return to_linear(z, near, far)
    raise ValueError(f"unknown direction {direction!r}")


def pixel_to_ndc(u, v, width: int, height: int):
    return 2.0 * np.asarray(u, dtype=float) / width - 1.0, 2.0 * np.asarray(v, dtype=float) / height - 1.0


def ndc_to_pixel(u, v, width: int, height: int):
    return (np.asarray(u, dtype=float) + 1.0) * width / 2.0, (np.asarray(v, dtype=float) + 1.0) * height / 2.0


def pixel_ndc_convert(u, v, width: int, height: int, direction: str = "to-ndc"):
    if direction == "to-ndc":
        return pixel_to_ndc(u, v, width, height)
    if direction == "to-pixel":
        return ndc_to_pixel(u, v, width, height)
    raise ValueError(f"unknown direction {direction!r}")


def relative_transform(pose_i: Pose, pose_0: Pose) -> np.ndarray:
    """``(R_i|t_i) (R_0|t_0)^-1``: reference-camera to view-i camera (both CV frames)."""
    R = pose_i.R @ pose_0.R.T
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = pose_i.t - R @ pose_0.t
    return T


def gl_relative_transform(pose_i: Pose, pose_0: Pose) -> np.ndarray:
    """:func:`relative_transform` expressed between OpenGL camera frames."""
    return FLIP_YZ @ relative_transform(pose_i, pose_0) @ FLIP_YZ


def project_points(points_world: np.ndarray, view: View):
    """Project world points into ``view``.

    Returns continuous pixel coordinates ``(u, v)`` and the linear depth of each point.
    """
    X = np.asarray(points_world, dtype=float).reshape(-1, 3) @ view.pose.R.T + view.pose.t
    z = X[:, 2]
    c = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = c.fx * X[:, 0] / z + c.cx
        v = c.fy * X[:, 1] / z + c.cy
    return u, v, z
