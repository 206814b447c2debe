"""Synthetic ground-truth scenes: cavity mesh, interior trajectory, exact
depth/uncertainty renders, and seeded pose/depth noise injection.

The cavity is a curved tube (planar-arc centerline) with sinusoidal wall
bumps, capped at both ends, so every geometric quantity has an analytic
cross-check. All randomness is drawn from per-frame derived streams
(seed, tag, frame_id), so outputs are independent of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .fusion import DepthObservation
from .geometry import CameraIntrinsics, RigidTransform, quat_to_matrix
from .mesh import TriangleMesh
from .raycast import DepthMap, MeshAccelerator, UncertaintyMap, render_depth

_POSE_STREAM = 101
_DEPTH_STREAM = 202
_TRAJ_STREAM = 303

UNCERTAINTY_FLOOR = 0.1  # mm


class InvalidSpec(ValueError):
    pass


class ClearanceViolation(ValueError):
    """A camera center comes closer than the required wall clearance."""


@dataclass
class PhantomSpec:
    """Curved bumpy tube: r(s, theta) = base + amp*sin(2*pi*f*s/L)*cos(3*theta)."""

    length: float = 100.0          # mm along the centerline arc
    base_radius: float = 15.0      # mm
    bump_amplitude: float = 2.0    # mm
    bump_frequency: float = 3.0    # sine periods along the length
    curvature: float = 0.004       # 1/mm of the planar centerline arc
    segments: int = 64             # vertices per ring
    seed: int = 0

    def __post_init__(self):
        if not (self.base_radius > self.bump_amplitude >= 0):
            raise InvalidSpec("need base_radius > bump_amplitude >= 0")
        if self.segments < 16:
            raise InvalidSpec("need >= 16 segments")
        if self.length <= 0 or self.curvature < 0:
            raise InvalidSpec("need length > 0 and curvature >= 0")
        if self.curvature * self.length >= np.pi:
            raise InvalidSpec("arc would bend more than 180 degrees")

    def centerline(self, s):
        """Centerline point(s) at arclength s; planar arc in the y=0 plane."""
        s = np.asarray(s, dtype=np.float64)
        k = self.curvature
        if k < 1e-12:
            return np.stack([np.zeros_like(s), np.zeros_like(s), s], axis=-1)
        r = 1.0 / k
        return np.stack([r * (1 - np.cos(k * s)), np.zeros_like(s), r * np.sin(k * s)], axis=-1)

    def frame(self, s):
        """(tangent, normal, binormal) unit vectors at arclength s."""
        s = np.asarray(s, dtype=np.float64)
        a = self.curvature * s
        zeros = np.zeros_like(a)
        tangent = np.stack([np.sin(a), zeros, np.cos(a)], axis=-1)
        normal = np.stack([np.cos(a), zeros, -np.sin(a)], axis=-1)
        binormal = np.broadcast_to(np.array([0.0, 1.0, 0.0]), tangent.shape)
        return tangent, normal, binormal

    def wall_radius(self, s, theta):
        s = np.asarray(s, dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        bump = np.sin(2 * np.pi * self.bump_frequency * s / self.length) * np.cos(3 * theta)
        return self.base_radius + self.bump_amplitude * bump

    @property
    def min_wall_radius(self) -> float:
        return self.base_radius - self.bump_amplitude

    def centerline_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from points to the (finite) centerline arc; analytic."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        k = self.curvature
        if k < 1e-12:
            s = np.clip(p[:, 2], 0.0, self.length)
            c = np.stack([np.zeros_like(s), np.zeros_like(s), s], axis=-1)
            return np.linalg.norm(p - c, axis=1)
        r = 1.0 / k
        ux = p[:, 0] - r
        uz = p[:, 2]
        ang = np.arctan2(uz, -ux)  # 0 at arc start, grows along the arc
        s = np.clip(np.where(ang < 0, 0.0, ang / k), 0.0, self.length)
        c = self.centerline(s)
        return np.linalg.norm(p - c, axis=1)


@dataclass
class TrajectorySpec:
    """Centerline-following camera path with lateral sway and look jitter."""

    frame_count: int = 200
    sway_amplitude: float = 3.0      # mm
    sway_period: float = 60.0        # frames
    lookat_jitter_deg: float = 2.0
    mode: str = "global_sweep"       # or "local_inspection"
    local_center_frame: int = 100
    local_span_frames: int = 50
    margin_fraction: float = 0.12    # arclength kept clear of the end caps
    clearance: float = 1.0           # mm, minimum distance to the wall

    def __post_init__(self):
        if self.frame_count < 1:
            raise InvalidSpec("frame_count must be >= 1")
        if self.mode not in ("global_sweep", "local_inspection"):
            raise InvalidSpec(f"unknown trajectory mode {self.mode!r}")
        if self.sway_period <= 0:
            raise InvalidSpec("sway_period must be > 0")


def _look_rotation(forward: np.ndarray, up_hint: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation with +z = forward, +y roughly along up_hint."""
    z = forward / np.linalg.norm(forward)
    x = np.cross(up_hint, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # forward parallel to hint; pick any perpendicular
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _rotvec_to_matrix(v: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    axis = v / angle
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _frame_rng(seed: int, stream: int, frame_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, frame_id])


def generate_cavity_mesh(spec: PhantomSpec) -> TriangleMesh:
    """Deterministic watertight tube-with-caps tessellation."""
    n_theta = spec.segments
    ring_step = 2 * np.pi * spec.base_radius / n_theta
    n_axial = max(2, int(round(spec.length / ring_step)) + 1)
    s = np.linspace(0.0, spec.length, n_axial)
    theta = np.arange(n_theta) * (2 * np.pi / n_theta)

    centers = spec.centerline(s)                      # (n_axial, 3)
    _, normal, binormal = spec.frame(s)
    radius = spec.wall_radius(s[:, None], theta[None, :])  # (n_axial, n_theta)
    ring_dir = (
        np.cos(theta)[None, :, None] * normal[:, None, :]
        + np.sin(theta)[None, :, None] * binormal[:, None, :]
    )
    vertices = centers[:, None, :] + radius[..., None] * ring_dir
    vertices = vertices.reshape(-1, 3)

    tris = []
    for i in range(n_axial - 1):
        for j in range(n_theta):
            a = i * n_theta + j
            b = i * n_theta + (j + 1) % n_theta
            c = (i + 1) * n_theta + j
            d = (i + 1) * n_theta + (j + 1) % n_theta
            tris.append((a, b, c))
            tris.append((b, d, c))
    start_center = len(vertices)
    end_center = len(vertices) + 1
    vertices = np.vstack([vertices, centers[0], centers[-1]])
    for j in range(n_theta):
        tris.append((start_center, (j + 1) % n_theta, j))
        base = (n_axial - 1) * n_theta
        tris.append((end_center, base + j, base + (j + 1) % n_theta))
    return TriangleMesh(vertices, np.asarray(tris, dtype=np.int64))


def generate_trajectory(
    spec: TrajectorySpec, phantom: PhantomSpec
) -> tuple[np.ndarray, list[RigidTransform]]:
    """(frame_ids, camera-to-world poses) along the cavity interior.

    Cameras follow the centerline with sinusoidal lateral sway and look
    along the tube with seeded per-frame jitter; every center keeps at
    least ``spec.clearance`` mm from the wall (ClearanceViolation if not).
    """
    n = spec.frame_count
    margin = spec.margin_fraction * phantom.length
    lo, hi = margin, phantom.length - margin
    if spec.mode == "local_inspection":
        if n > 1:
            step = (hi - lo) / (n - 1)
        else:
            step = 0.0
        c = lo + np.clip(spec.local_center_frame, 0, n - 1) * step
        half = 0.5 * spec.local_span_frames * step
        lo, hi = max(lo, c - half), min(hi, c + half)
    s = np.linspace(lo, hi, n) if n > 1 else np.array([lo])

    centers = phantom.centerline(s)
    tangent, normal, binormal = phantom.frame(s)
    phase = 2 * np.pi * np.arange(n) / spec.sway_period
    sway = spec.sway_amplitude * (
        np.sin(phase)[:, None] * normal + np.cos(phase)[:, None] * binormal
    )
    centers = centers + sway

    # conservative analytic clearance: sway must stay inside the thinnest wall
    margin_left = phantom.min_wall_radius - spec.clearance
    worst = np.linalg.norm(sway, axis=1).max() if n else 0.0
    if worst > margin_left:
        raise ClearanceViolation(
            f"sway {worst:.2f} mm exceeds {margin_left:.2f} mm of usable bore"
        )

    jitter = np.deg2rad(spec.lookat_jitter_deg)
    poses = []
    for i in range(n):
        rot = _look_rotation(tangent[i], -normal[i])
        if jitter > 0:
            rng = _frame_rng(phantom.seed, _TRAJ_STREAM, i)
            rot = _rotvec_to_matrix(rng.normal(0.0, jitter, 3)) @ rot
        poses.append(RigidTransform(rot, centers[i]))
    return np.arange(n, dtype=np.int64), poses


def render_dataset(
    mesh: TriangleMesh,
    poses: list[RigidTransform],
    intrinsics: CameraIntrinsics,
    frame_ids: np.ndarray | None = None,
) -> list[DepthObservation]:
    """Exact depth renders with floor-value uncertainty maps."""
    acc = MeshAccelerator(mesh)
    if frame_ids is None:
        frame_ids = np.arange(len(poses), dtype=np.int64)
    floor = np.full((intrinsics.height, intrinsics.width), UNCERTAINTY_FLOOR, dtype=np.float32)
    out = []
    for fid, pose in zip(frame_ids, poses):
        depth = render_depth(acc, intrinsics, pose)
        out.append(
            DepthObservation(
                frame_id=int(fid),
                depth=depth,
                intrinsics=intrinsics,
                cam_to_world=pose,
                uncertainty=UncertaintyMap(floor.copy()),
            )
        )
    return out


@dataclass
class PoseNoise:
    rot_sigma_deg: float = 0.0
    trans_sigma: float = 0.0            # mm, per frame, independent
    drift_trans_per_frame: float = 0.0  # mm random-walk increment sigma
    drift_rot_deg_per_frame: float = 0.0

    def __post_init__(self):
        if min(self.rot_sigma_deg, self.trans_sigma,
               self.drift_trans_per_frame, self.drift_rot_deg_per_frame) < 0:
            raise InvalidSpec("pose noise sigmas must be >= 0")


@dataclass
class DepthNoise:
    mult_sigma: float = 0.0        # fraction, per pixel
    add_sigma: float = 0.0         # mm, per pixel
    warp_amplitude: float = 0.0    # fraction, low-frequency multiplicative
    warp_period_px: float = 64.0
    outlier_rate: float = 0.0
    outlier_magnitude: float = 20.0  # mm

    def __post_init__(self):
        if min(self.mult_sigma, self.add_sigma, self.warp_amplitude) < 0:
            raise InvalidSpec("depth noise sigmas must be >= 0")
        if not (0 <= self.outlier_rate <= 1):
            raise InvalidSpec("outlier_rate must be in [0, 1]")
        if self.warp_period_px <= 0:
            raise InvalidSpec("warp_period_px must be > 0")


@dataclass
class NoiseSpec:
    pose: PoseNoise = field(default_factory=PoseNoise)
    depth: DepthNoise = field(default_factory=DepthNoise)
    uncertainty_calibration: float = 1.0
    seed: int = 0


def perturb_poses(poses: list[RigidTransform], noise: NoiseSpec) -> list[RigidTransform]:
    """Per-frame Gaussian pose noise plus an integrated random-walk drift.

    Rotations perturb the orientation in place (about the camera center);
    drift starts at zero on frame 0. Seeded and order-independent.
    """
    p = noise.pose
    rot_sigma = np.deg2rad(p.rot_sigma_deg)
    drift_rot = np.deg2rad(p.drift_rot_deg_per_frame)

    n = len(poses)
    steps_t = np.zeros((n, 3))
    steps_r = np.zeros((n, 3))
    jit_t = np.zeros((n, 3))
    jit_r = np.zeros((n, 3))
    for i in range(n):
        rng = _frame_rng(noise.seed, _POSE_STREAM, i)
        jit_t[i] = rng.normal(0.0, p.trans_sigma, 3) if p.trans_sigma > 0 else 0.0
        jit_r[i] = rng.normal(0.0, rot_sigma, 3) if rot_sigma > 0 else 0.0
        if i > 0:
            steps_t[i] = rng.normal(0.0, p.drift_trans_per_frame, 3) if p.drift_trans_per_frame > 0 else 0.0
            steps_r[i] = rng.normal(0.0, drift_rot, 3) if drift_rot > 0 else 0.0
    drift_t = np.cumsum(steps_t, axis=0)

    out = []
    drift_r_mat = np.eye(3)
    for i, pose in enumerate(poses):
        drift_r_mat = _rotvec_to_matrix(steps_r[i]) @ drift_r_mat
        rot = _rotvec_to_matrix(jit_r[i]) @ drift_r_mat @ pose.rotation
        center = pose.translation + jit_t[i] + drift_t[i]
        out.append(RigidTransform(rot, center))
    return out


def _warp_field(shape: tuple[int, int], amplitude: float, period: float,
                rng: np.random.Generator) -> np.ndarray:
    """Low-frequency multiplicative field; per-pixel variance amplitude^2/4."""
    h, w = shape
    phase_u, phase_v = rng.uniform(0.0, 2 * np.pi, 2)
    u = np.arange(w)[None, :]
    v = np.arange(h)[:, None]
    return amplitude * np.sin(2 * np.pi * u / period + phase_u) * np.sin(
        2 * np.pi * v / period + phase_v)


def perturb_depths(
    observations: list[DepthObservation], noise: NoiseSpec
) -> list[DepthObservation]:
    """Multiplicative + additive + low-frequency-warp depth noise and outliers.

    depth' = depth * (1 + eps_mult + warp(u, v)) + eps_add, with outlier
    pixels replaced by depth +- outlier_magnitude. The paired uncertainty
    map reports each pixel's analytic composite noise sigma times the
    calibration factor (outlier magnitude added in quadrature at outlier
    pixels), floored at the clean-data floor. Seeded per frame.
    """
    d = noise.depth
    out = []
    for obs in observations:
        rng = _frame_rng(noise.seed, _DEPTH_STREAM, obs.frame_id)
        depth = obs.depth.values.astype(np.float64)
        valid = np.isfinite(depth)
        shape = depth.shape

        eps_mult = rng.normal(0.0, d.mult_sigma, shape) if d.mult_sigma > 0 else np.zeros(shape)
        warp = (
            _warp_field(shape, d.warp_amplitude, d.warp_period_px, rng)
            if d.warp_amplitude > 0
            else np.zeros(shape)
        )
        eps_add = rng.normal(0.0, d.add_sigma, shape) if d.add_sigma > 0 else np.zeros(shape)
        noisy = depth * (1.0 + eps_mult + warp) + eps_add

        outlier = np.zeros(shape, dtype=bool)
        if d.outlier_rate > 0:
            outlier = valid & (rng.random(shape) < d.outlier_rate)
            signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
            noisy = np.where(outlier, depth + signs * d.outlier_magnitude, noisy)
        noisy = np.where(valid, np.maximum(noisy, 0.01), np.nan)

        var = depth ** 2 * (d.mult_sigma ** 2 + d.warp_amplitude ** 2 / 4.0) + d.add_sigma ** 2
        var = var + np.where(outlier, d.outlier_magnitude ** 2, 0.0)
        sigma = noise.uncertainty_calibration * np.sqrt(var)
        sigma = np.where(valid, np.maximum(sigma, UNCERTAINTY_FLOOR), UNCERTAINTY_FLOOR)

        out.append(
            replace(
                obs,
                depth=DepthMap(noisy.astype(np.float32)),
                uncertainty=UncertaintyMap(sigma.astype(np.float32)),
            )
        )
    return out
