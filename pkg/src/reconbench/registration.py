"""Reconstruction-to-reference registration.

Pipeline: scale from consecutive camera displacements, closed-form rigid
fit on camera centers inside RANSAC, reprojection correspondences rendered
from both surfaces, and trimmed fixed-pair ICP refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    SimilarityTransform,
    compose,
    rotation_angle,
)
from .mesh import TriangleMesh, apply_transform
from .raycast import (
    MeshAccelerator,
    render_depth,
    render_depth_sparse,
    reproject_keypoints,
)


class DegenerateTrajectory(ValueError):
    """No usable consecutive displacement pair for scale estimation."""


class DegenerateGeometry(ValueError):
    """Camera centers too collinear for a stable rigid solve."""


class ConsensusTooSmall(ValueError):
    """Best RANSAC consensus has fewer than 3 inliers."""


class TooFewCorrespondences(ValueError):
    """ICP needs at least 3 point pairs."""


class NoCorrespondences(ValueError):
    """Every keypoint was invalid in one of the rendered depth maps."""


@dataclass
class TrajectoryPair:
    """Matched camera-to-world poses in the reference and estimated frames."""

    frame_ids: np.ndarray
    ref_poses: list[RigidTransform]
    est_poses: list[RigidTransform]

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        if not (len(self.frame_ids) == len(self.ref_poses) == len(self.est_poses)):
            raise ValueError("trajectories must be in one-to-one frame correspondence")

    def __len__(self) -> int:
        return len(self.frame_ids)

    @property
    def ref_centers(self) -> np.ndarray:
        return np.array([p.translation for p in self.ref_poses])

    @property
    def est_centers(self) -> np.ndarray:
        return np.array([p.translation for p in self.est_poses])


@dataclass
class RansacParams:
    seed: int
    iterations: int = 2000
    inlier_threshold: float = 2.0  # mm
    min_sample: int = 3

    def __post_init__(self):
        if self.iterations < 1 or self.inlier_threshold <= 0:
            raise ValueError("need iterations >= 1 and inlier_threshold > 0")


@dataclass
class IcpParams:
    max_iters: int = 50
    trim_fraction: float = 0.2
    convergence_eps: float = 1e-6

    def __post_init__(self):
        if not (0 <= self.trim_fraction < 1):
            raise ValueError("trim_fraction must be in [0, 1)")


@dataclass
class CorrespondenceSet:
    """Paired 3D points reprojected from the same pixels onto both surfaces."""

    frame_ids: np.ndarray  # (P,)
    pixels: np.ndarray     # (P, 2)
    x_ref: np.ndarray      # (P, 3)
    x_rec: np.ndarray      # (P, 3)

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.x_ref = np.asarray(self.x_ref, dtype=np.float64).reshape(-1, 3)
        self.x_rec = np.asarray(self.x_rec, dtype=np.float64).reshape(-1, 3)
        n = len(self.frame_ids)
        if not (len(self.pixels) == len(self.x_ref) == len(self.x_rec) == n):
            raise ValueError("correspondence arrays disagree in length")
        if n and not (np.all(np.isfinite(self.x_ref)) and np.all(np.isfinite(self.x_rec))):
            raise ValueError("correspondences contain non-finite points")

    def __len__(self) -> int:
        return len(self.frame_ids)


@dataclass
class RegistrationResult:
    transform: SimilarityTransform
    inlier_count: int
    rms_residual: float
    per_point_residuals: np.ndarray
    converged: bool = True
    iterations: int = 0


def estimate_scale(traj: TrajectoryPair) -> float:
    """Median ratio of consecutive reference/estimated camera displacements."""
    if len(traj) < 2:
        raise DegenerateTrajectory("need at least 2 frames")
    d_ref = np.linalg.norm(np.diff(traj.ref_centers, axis=0), axis=1)
    d_est = np.linalg.norm(np.diff(traj.est_centers, axis=0), axis=1)
    if not np.any(d_ref > 1e-6):
        raise DegenerateTrajectory("reference trajectory never moves more than 1e-6 mm")
    usable = d_est >= 1e-9
    if not usable.any():
        raise DegenerateTrajectory("estimated trajectory never moves")
    scale = float(np.median(d_ref[usable] / d_est[usable]))
    if scale <= 0:
        raise DegenerateTrajectory("non-positive displacement ratio")
    return scale


def solve_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form least-squares R, t with R @ source + t ~ target (SVD)."""
    src_mean = source.mean(axis=0)
    tgt_mean = target.mean(axis=0)
    h = (source - src_mean).T @ (target - tgt_mean)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, tgt_mean - r @ src_mean


def _collinear(points: np.ndarray) -> bool:
    a, b, c = points
    area2 = np.linalg.norm(np.cross(b - a, c - a))
    extent = max(np.linalg.norm(b - a), np.linalg.norm(c - a), 1e-12)
    return area2 < 1e-9 * extent * extent


def pose_based_rigid(
    traj: TrajectoryPair, scale: float, ransac: RansacParams
) -> RegistrationResult:
    """RANSAC rigid fit on camera centers with the scale fixed up front.

    The winning consensus set is refit in closed form; the result transform
    (scale * rotation, translation) maps estimated-frame points into the
    reference frame. Hypothesis selection is deterministic for a fixed seed:
    best inlier count, then lower rms, then lower hypothesis index.
    """
    if len(traj) < 3:
        raise DegenerateGeometry("need at least 3 camera centers")
    src = scale * traj.est_centers
    tgt = traj.ref_centers
    n = len(src)
    rng = np.random.default_rng(ransac.seed)

    best_count = -1
    best_rms = np.inf
    best_inliers: np.ndarray | None = None
    for _ in range(ransac.iterations):
        sample = rng.choice(n, size=ransac.min_sample, replace=False)
        if _collinear(src[sample]):
            continue
        r, t = solve_rigid(src[sample], tgt[sample])
        res = np.linalg.norm(src @ r.T + t - tgt, axis=1)
        inliers = res < ransac.inlier_threshold
        count = int(inliers.sum())
        if count < ransac.min_sample:
            continue
        rms = float(np.sqrt(np.mean(res[inliers] ** 2)))
        if count > best_count or (count == best_count and rms < best_rms):
            best_count, best_rms, best_inliers = count, rms, inliers
    if best_inliers is None:
        raise DegenerateGeometry("no non-collinear RANSAC sample found")
    if best_count < 3:
        raise ConsensusTooSmall(f"best consensus has {best_count} inlier(s)")

    r, t = solve_rigid(src[best_inliers], tgt[best_inliers])
    res = np.linalg.norm(src @ r.T + t - tgt, axis=1)
    rms = float(np.sqrt(np.mean(res[best_inliers] ** 2)))
    return RegistrationResult(
        transform=SimilarityTransform(scale, r, t),
        inlier_count=best_count,
        rms_residual=rms,
        per_point_residuals=res,
    )


def registered_camera(reg: SimilarityTransform, cam_to_world: RigidTransform) -> RigidTransform:
    """Camera pose carried into the reference frame (orientation + mapped center)."""
    composed = compose(reg, cam_to_world)
    return RigidTransform(composed.rotation, composed.translation)


def build_correspondences(
    ref_mesh: TriangleMesh,
    ref_poses: list[RigidTransform],
    rec_mesh: TriangleMesh,
    rec_poses: list[RigidTransform],
    intrinsics_ref: CameraIntrinsics,
    intrinsics_rec: CameraIntrinsics,
    keypoints_per_frame: list[np.ndarray],
    frame_ids: np.ndarray | None = None,
    discontinuity_threshold: float = 5.0,
    sparse: bool = True,
) -> CorrespondenceSet:
    """Reproject per-frame keypoints onto both surfaces via rendered depth.

    ``rec_mesh`` / ``rec_poses`` must already live in the reference frame
    (initial registration applied). A pair is emitted for every keypoint
    whose interpolated depth is valid in both rendered maps. ``sparse``
    casts rays only at the pixels the keypoints touch (identical results).
    """
    if not (len(ref_poses) == len(rec_poses) == len(keypoints_per_frame)):
        raise ValueError("poses and keypoints must agree per frame")
    if frame_ids is None:
        frame_ids = np.arange(len(ref_poses), dtype=np.int64)
    acc_ref = ref_mesh if isinstance(ref_mesh, MeshAccelerator) else MeshAccelerator(ref_mesh)
    acc_rec = rec_mesh if isinstance(rec_mesh, MeshAccelerator) else MeshAccelerator(rec_mesh)

    fids, pixels, x_ref, x_rec = [], [], [], []
    for fid, pose_ref, pose_rec, kps in zip(frame_ids, ref_poses, rec_poses, keypoints_per_frame):
        if len(kps) == 0:
            continue
        if sparse:
            d_ref = render_depth_sparse(acc_ref, intrinsics_ref, pose_ref, kps)
            d_rec = render_depth_sparse(acc_rec, intrinsics_rec, pose_rec, kps)
        else:
            d_ref = render_depth(acc_ref, intrinsics_ref, pose_ref)
            d_rec = render_depth(acc_rec, intrinsics_rec, pose_rec)
        kept_r, pts_r = reproject_keypoints(
            d_ref, kps, intrinsics_ref, pose_ref, discontinuity_threshold)
        kept_e, pts_e = reproject_keypoints(
            d_rec, kps, intrinsics_rec, pose_rec, discontinuity_threshold)
        common, ir, ie = np.intersect1d(kept_r, kept_e, return_indices=True)
        if common.size == 0:
            continue
        fids.append(np.full(common.size, fid, dtype=np.int64))
        pixels.append(np.asarray(kps)[common])
        x_ref.append(pts_r[ir])
        x_rec.append(pts_e[ie])
    if not fids:
        raise NoCorrespondences("no keypoint valid in both rendered depth maps")
    return CorrespondenceSet(
        np.concatenate(fids), np.concatenate(pixels),
        np.concatenate(x_ref), np.concatenate(x_rec),
    )


def refine_icp(
    corr: CorrespondenceSet,
    init: SimilarityTransform | None = None,
    params: IcpParams | None = None,
    rematch_mesh: TriangleMesh | None = None,
) -> RegistrationResult:
    """Iterated trimmed rigid solve on the fixed correspondence pairs.

    Each iteration keeps the best (1 - trim_fraction) pairs by residual and
    re-solves rotation + translation in closed form (scale stays locked at
    ``init.scale``). The returned transform maps x_rec onto x_ref, starting
    from ``init``. With ``rematch_mesh`` given, targets are re-matched to
    the closest reference-surface points each iteration instead of staying
    fixed. Non-convergence is reported via the ``converged`` flag.
    """
    params = params or IcpParams()
    init = init or SimilarityTransform.identity()
    n = len(corr)
    if n < 3:
        raise TooFewCorrespondences(f"got {n} pair(s), need >= 3")
    keep_n = max(3, int(np.ceil((1.0 - params.trim_fraction) * n)))
    scale = init.scale
    current = init
    acc = MeshAccelerator(rematch_mesh) if rematch_mesh is not None else None

    converged = False
    iters = 0
    rms = np.inf
    for iters in range(1, params.max_iters + 1):
        moved = current.apply(corr.x_rec)
        targets = acc.closest_points(moved)[1] if acc is not None else corr.x_ref
        res = np.linalg.norm(moved - targets, axis=1)
        keep = np.argsort(res, kind="stable")[:keep_n]
        r, t = solve_rigid(scale * corr.x_rec[keep], targets[keep])
        new = SimilarityTransform(scale, r, t)
        rms = float(np.sqrt(np.mean(
            np.sum((new.apply(corr.x_rec[keep]) - targets[keep]) ** 2, axis=1))))
        update = rotation_angle(new.rotation @ current.rotation.T) + float(
            np.linalg.norm(new.translation - current.translation))
        current = new
        if update < params.convergence_eps:
            converged = True
            break

    final_res = np.linalg.norm(current.apply(corr.x_rec) - corr.x_ref, axis=1)
    return RegistrationResult(
        transform=current,
        inlier_count=keep_n,
        rms_residual=rms,
        per_point_residuals=final_res,
        converged=converged,
        iterations=iters,
    )


@dataclass
class PipelineRegistration:
    """All artifacts of the two-stage registration."""

    scale: float
    initial: RegistrationResult          # pose-based, Sim(3)
    refined: RegistrationResult          # ICP refinement, rigid
    composed: SimilarityTransform        # refined o initial
    correspondences: CorrespondenceSet


def register_reconstruction(
    traj: TrajectoryPair,
    ref_mesh: TriangleMesh,
    rec_mesh: TriangleMesh,
    intrinsics_ref: CameraIntrinsics,
    intrinsics_rec: CameraIntrinsics,
    keypoints_per_frame: list[np.ndarray],
    ransac: RansacParams,
    icp: IcpParams | None = None,
    rematch: bool = False,
    discontinuity_threshold: float = 5.0,
) -> PipelineRegistration:
    """Full chain: scale, RANSAC pose fit, correspondences, ICP refinement."""
    scale = estimate_scale(traj)
    initial = pose_based_rigid(traj, scale, ransac)
    rec_in_ref = apply_transform(initial.transform, rec_mesh)
    rec_poses_in_ref = [registered_camera(initial.transform, p) for p in traj.est_poses]
    corr = build_correspondences(
        ref_mesh, traj.ref_poses, rec_in_ref, rec_poses_in_ref,
        intrinsics_ref, intrinsics_rec, keypoints_per_frame,
        frame_ids=traj.frame_ids, discontinuity_threshold=discontinuity_threshold,
    )
    refined = refine_icp(
        corr, params=icp, rematch_mesh=ref_mesh if rematch else None)
    composed = compose(refined.transform, initial.transform)
    return PipelineRegistration(
        scale=scale, initial=initial, refined=refined,
        composed=composed, correspondences=corr,
    )
