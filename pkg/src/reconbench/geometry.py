"""Transform algebra and the pinhole camera model.

Conventions used throughout the package:

* world / volume units are millimeters
* camera frame is +z forward, +x right, +y down (image row grows with +y)
* depth is the camera-frame z coordinate (plane depth), not ray length
* pixel (0, 0) is the *center* of the top-left pixel; the image footprint
  therefore spans [-0.5, width - 0.5] x [-0.5, height - 0.5]
* quaternions are (w, x, y, z), unit norm, used only at I/O boundaries
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


class NonPositiveDepth(ValueError):
    """Backprojection was asked for a depth <= 0."""


class BehindCamera(ValueError):
    """Projection was asked for a point with camera-frame z <= 0."""


def _orthonormalized(rotation: np.ndarray) -> np.ndarray:
    """Return the closest proper rotation matrix (Frobenius sense)."""
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
    if not np.all(np.isfinite(rotation)):
        raise ValueError("rotation contains non-finite entries")
    drift = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if drift <= ORTHO_TOL and np.linalg.det(rotation) > 0:
        return rotation
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1.0
        r = u @ vt
    return r


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: x -> R x + t, translation in mm."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _orthonormalized(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation contains non-finite entries")
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quat(cls, translation, quat_wxyz) -> "RigidTransform":
        return cls(quat_to_matrix(quat_wxyz), translation)

    @property
    def scale(self) -> float:
        return 1.0

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_quat(self) -> np.ndarray:
        return matrix_to_quat(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


@dataclass(frozen=True)
class SimilarityTransform:
    """Sim(3) element: x -> s R x + t, scale > 0, translation in mm."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        s = float(self.scale)
        if not (np.isfinite(s) and s > 0):
            raise ValueError(f"scale must be finite and > 0, got {s}")
        r = _orthonormalized(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation contains non-finite entries")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_rigid(cls, t: RigidTransform, scale: float = 1.0) -> "SimilarityTransform":
        return cls(scale, t.rotation, t.translation)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "SimilarityTransform":
        m = np.asarray(m, dtype=np.float64)
        s = float(np.cbrt(np.linalg.det(m[:3, :3])))
        return cls(s, m[:3, :3] / s, m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * (points @ self.rotation.T) + self.translation

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def rigid_part(self) -> RigidTransform:
        return RigidTransform(self.rotation, self.translation)


Transform = RigidTransform | SimilarityTransform


def compose(a: Transform, b: Transform) -> Transform:
    """Composition a o b (apply b first, then a). Scales multiply."""
    rot = a.rotation @ b.rotation
    trans = a.scale * (a.rotation @ b.translation) + a.translation
    if isinstance(a, RigidTransform) and isinstance(b, RigidTransform):
        return RigidTransform(rot, trans)
    return SimilarityTransform(a.scale * b.scale, rot, trans)


def invert(t: Transform) -> Transform:
    return t.inverse()


def chain_tracker_to_camera(
    v_t_a: RigidTransform,
    a_t_t: RigidTransform,
    e_t_t: RigidTransform,
    e_t_c: RigidTransform,
) -> RigidTransform:
    """Camera pose in the reference volume from the tracked-frame chain.

    Combines the volume<-anatomy registration, the tracked anatomy and
    endoscope marker poses, and the fixed marker-to-camera calibration:
    returns v_t_a o a_t_t o inverse(e_t_t) o e_t_c.
    """
    return compose(compose(v_t_a, a_t_t), compose(e_t_t.inverse(), e_t_c))


def quat_to_matrix(quat_wxyz) -> np.ndarray:
    q = np.asarray(quat_wxyz, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(rotation: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    r = np.asarray(rotation, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_angle(rotation: np.ndarray) -> float:
    """Rotation angle in radians of a 3x3 rotation matrix."""
    c = (np.trace(rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths / principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def k_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        """Mask of pixels inside the image footprint (pixel-center origin)."""
        pixels = np.asarray(pixels, dtype=np.float64)
        u, v = pixels[..., 0], pixels[..., 1]
        return (
            (u >= -0.5) & (u <= self.width - 0.5) & (v >= -0.5) & (v <= self.height - 0.5)
        )


def backproject(
    pixels: np.ndarray,
    depths: np.ndarray,
    intrinsics: CameraIntrinsics,
    cam_to_world: Transform,
) -> np.ndarray:
    """Lift pixels at the given plane depths to world-frame 3D points.

    ``pixels`` is (..., 2) as (u, v); ``depths`` broadcasts against the
    leading shape. Depth is the camera-frame z coordinate.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise NonPositiveDepth("depth must be > 0")
    x = (pixels[..., 0] - intrinsics.cx) / intrinsics.fx * depths
    y = (pixels[..., 1] - intrinsics.cy) / intrinsics.fy * depths
    cam_pts = np.stack([x, y, depths * np.ones_like(x)], axis=-1)
    return cam_to_world.apply(cam_pts)


def project(
    points: np.ndarray,
    intrinsics: CameraIntrinsics,
    cam_to_world: Transform,
) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to (pixels, plane depths).

    Raises BehindCamera if any point has camera-frame z <= 0.
    """
    points = np.asarray(points, dtype=np.float64)
    cam_pts = cam_to_world.inverse().apply(points)
    z = cam_pts[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("point(s) behind the camera plane")
    u = cam_pts[..., 0] / z * intrinsics.fx + intrinsics.cx
    v = cam_pts[..., 1] / z * intrinsics.fy + intrinsics.cy
    return np.stack([u, v], axis=-1), z
