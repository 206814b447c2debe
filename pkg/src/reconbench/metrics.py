"""Agreement metrics: point-to-mesh distance and target registration error."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, RigidTransform
from .mesh import TriangleMesh
from .raycast import MeshAccelerator, render_depth_sparse, reproject_keypoints
from .registration import CorrespondenceSet, build_correspondences


class EmptyInput(ValueError):
    """Metric invoked with no points / no correspondences."""


@dataclass
class ErrorStats:
    """Summary statistics over non-negative error samples (mm)."""

    mean: float
    std: float
    median: float
    p90: float
    p95: float
    count: int
    hist_edges: np.ndarray   # (B + 1,)
    hist_counts: np.ndarray  # (B,), last bin absorbs > p99.5 overflow

    @classmethod
    def from_samples(cls, samples: np.ndarray, bin_width: float = 0.5) -> "ErrorStats":
        samples = np.asarray(samples, dtype=np.float64).ravel()
        if samples.size == 0:
            raise EmptyInput("no samples")
        hi = float(np.percentile(samples, 99.5))
        n_bins = max(1, int(np.ceil(max(hi, bin_width) / bin_width)))
        edges = np.arange(n_bins + 1) * bin_width
        counts, _ = np.histogram(np.minimum(samples, edges[-1] - 1e-12), bins=edges)
        return cls(
            mean=float(samples.mean()),
            std=float(samples.std()),
            median=float(np.median(samples)),
            p90=float(np.percentile(samples, 90)),
            p95=float(np.percentile(samples, 95)),
            count=int(samples.size),
            hist_edges=edges,
            hist_counts=counts,
        )


@dataclass
class PerPointErrors:
    """Per-point error table for spatial error maps (array-of-columns)."""

    points: np.ndarray                 # (N, 3)
    errors: np.ndarray                 # (N,)
    frame_ids: np.ndarray | None = None
    pixels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.errors = np.asarray(self.errors, dtype=np.float64).reshape(-1)
        if np.any(self.errors < 0):
            raise ValueError("errors must be non-negative")

    def __len__(self) -> int:
        return len(self.errors)


def point_to_mesh(
    points: np.ndarray,
    reference: TriangleMesh | MeshAccelerator,
    bin_width: float = 0.5,
    frame_ids: np.ndarray | None = None,
    pixels: np.ndarray | None = None,
) -> tuple[ErrorStats, PerPointErrors]:
    """Exact unsigned distance from each point to the nearest triangle."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.size == 0:
        raise EmptyInput("no query points")
    acc = reference if isinstance(reference, MeshAccelerator) else MeshAccelerator(reference)
    dists, _ = acc.closest_points(points)
    stats = ErrorStats.from_samples(dists, bin_width)
    return stats, PerPointErrors(points, dists, frame_ids, pixels)


def target_registration_error(
    corr: CorrespondenceSet, bin_width: float = 0.5
) -> tuple[ErrorStats, PerPointErrors]:
    """Per-pair Euclidean distance between the two reprojections, pooled."""
    if len(corr) == 0:
        raise EmptyInput("empty correspondence set")
    errors = np.linalg.norm(corr.x_ref - corr.x_rec, axis=1)
    stats = ErrorStats.from_samples(errors, bin_width)
    return stats, PerPointErrors(corr.x_rec, errors, corr.frame_ids, corr.pixels)


def per_frame_means(frame_ids: np.ndarray, errors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(unique frame ids, mean error per frame), sorted by frame id."""
    order = np.argsort(frame_ids, kind="stable")
    fids, starts = np.unique(frame_ids[order], return_index=True)
    means = np.array([m.mean() for m in np.split(errors[order], starts[1:])])
    return fids, means


@dataclass
class EvaluationReport:
    """Bundle of both metrics plus per-point maps and per-frame aggregates."""

    tre: ErrorStats
    p2m: ErrorStats
    tre_points: PerPointErrors
    p2m_points: PerPointErrors
    tre_frame_mean: float
    tre_frame_std: float
    correspondence_count: int
    raw_depth_tre: ErrorStats | None = None
    raw_depth_p2m: ErrorStats | None = None
    raw_depth_points: PerPointErrors | None = None

    def summary(self) -> dict[str, float]:
        return {
            "tre_mean": self.tre.mean,
            "tre_std": self.tre.std,
            "p2m_mean": self.p2m.mean,
            "p2m_std": self.p2m.std,
        }


def depth_projection_errors(
    observations,
    ref_mesh: TriangleMesh | MeshAccelerator,
    ref_poses: list[RigidTransform],
    intrinsics_ref: CameraIntrinsics,
    keypoints_per_frame: list[np.ndarray],
    discontinuity_threshold: float = 5.0,
    bin_width: float = 0.5,
) -> tuple[ErrorStats, ErrorStats, PerPointErrors]:
    """Per-frame unfused-depth variant: keypoints lifted through each frame's
    own depth map (at its registered pose) against the reference reprojection.

    Returns (tre_stats, p2m_stats, per-point table). The observations'
    ``cam_to_world`` must already be in the reference frame.
    """
    acc_ref = ref_mesh if isinstance(ref_mesh, MeshAccelerator) else MeshAccelerator(ref_mesh)
    fids, pix, x_ref, x_raw = [], [], [], []
    for obs, pose_ref, kps in zip(observations, ref_poses, keypoints_per_frame):
        if len(kps) == 0:
            continue
        d_ref = render_depth_sparse(acc_ref, intrinsics_ref, pose_ref, kps)
        kept_r, pts_r = reproject_keypoints(
            d_ref, kps, intrinsics_ref, pose_ref, discontinuity_threshold)
        kept_o, pts_o = reproject_keypoints(
            obs.depth, kps, obs.intrinsics, obs.cam_to_world, discontinuity_threshold)
        common, ir, io_ = np.intersect1d(kept_r, kept_o, return_indices=True)
        if common.size == 0:
            continue
        fids.append(np.full(common.size, obs.frame_id, dtype=np.int64))
        pix.append(np.asarray(kps)[common])
        x_ref.append(pts_r[ir])
        x_raw.append(pts_o[io_])
    if not fids:
        raise EmptyInput("no keypoint valid in both the depth map and the reference render")
    x_ref = np.concatenate(x_ref)
    x_raw = np.concatenate(x_raw)
    errors = np.linalg.norm(x_ref - x_raw, axis=1)
    tre_stats = ErrorStats.from_samples(errors, bin_width)
    p2m_stats, _ = point_to_mesh(x_raw, acc_ref, bin_width)
    table = PerPointErrors(x_raw, errors, np.concatenate(fids), np.concatenate(pix))
    return tre_stats, p2m_stats, table


def evaluation_report(
    ref_mesh: TriangleMesh,
    rec_mesh: TriangleMesh,
    ref_poses: list[RigidTransform],
    rec_poses: list[RigidTransform],
    intrinsics_ref: CameraIntrinsics,
    intrinsics_rec: CameraIntrinsics,
    keypoints_per_frame: list[np.ndarray],
    frame_ids: np.ndarray | None = None,
    discontinuity_threshold: float = 5.0,
    bin_width: float = 0.5,
    point_to_mesh_mode: str = "keypoints",
    raw_observations=None,
    raw_poses: list[RigidTransform] | None = None,
) -> EvaluationReport:
    """Full agreement report between a registered reconstruction and reference.

    ``rec_mesh`` / ``rec_poses`` must be in the reference frame already.
    ``point_to_mesh_mode`` is "keypoints" (reprojected reconstruction points,
    the default) or "vertices" (all reconstruction mesh vertices).
    ``raw_observations`` (+ ``raw_poses``) enable the per-frame unfused-depth
    variant.
    """
    if point_to_mesh_mode not in ("keypoints", "vertices"):
        raise ValueError(f"unknown point_to_mesh_mode {point_to_mesh_mode!r}")
    corr = build_correspondences(
        ref_mesh, ref_poses, rec_mesh, rec_poses,
        intrinsics_ref, intrinsics_rec, keypoints_per_frame,
        frame_ids=frame_ids, discontinuity_threshold=discontinuity_threshold,
    )
    tre_stats, tre_points = target_registration_error(corr, bin_width)
    acc_ref = MeshAccelerator(ref_mesh)
    if point_to_mesh_mode == "keypoints":
        p2m_stats, p2m_points = point_to_mesh(
            corr.x_rec, acc_ref, bin_width, corr.frame_ids, corr.pixels)
    else:
        p2m_stats, p2m_points = point_to_mesh(rec_mesh.vertices, acc_ref, bin_width)
    _, frame_means = per_frame_means(tre_points.frame_ids, tre_points.errors)

    raw_tre = raw_p2m = raw_points = None
    if raw_observations is not None:
        if raw_poses is None:
            raw_poses = [o.cam_to_world for o in raw_observations]
        from dataclasses import replace
        obs_reg = [replace(o, cam_to_world=p) for o, p in zip(raw_observations, raw_poses)]
        raw_tre, raw_p2m, raw_points = depth_projection_errors(
            obs_reg, acc_ref, ref_poses, intrinsics_ref, keypoints_per_frame,
            discontinuity_threshold, bin_width,
        )
    return EvaluationReport(
        tre=tre_stats,
        p2m=p2m_stats,
        tre_points=tre_points,
        p2m_points=p2m_points,
        tre_frame_mean=float(frame_means.mean()),
        tre_frame_std=float(frame_means.std()),
        correspondence_count=len(corr),
        raw_depth_tre=raw_tre,
        raw_depth_p2m=raw_p2m,
        raw_depth_points=raw_points,
    )
