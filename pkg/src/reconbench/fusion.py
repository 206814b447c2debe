"""Volumetric TSDF fusion of depth observations and surface extraction.

Per-voxel projection semantics: every voxel center is projected into the
observation; with observed depth z_obs and voxel camera depth z_vox the
signed distance z_obs - z_vox is clamped to [-1, 1] over one truncation
band and accumulated as a running weighted average. Updates more than one
band behind the surface are skipped (no space carving into occluded space).
Voxel center (i, j, k) sits at origin + (i + 0.5) * voxel_size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from numba import njit, prange

from . import mcubes
from .geometry import CameraIntrinsics, Transform, backproject
from .mesh import TriangleMesh
from .raycast import DepthMap, UncertaintyMap

logger = logging.getLogger(__name__)


class NoValidObservations(ValueError):
    """Fusion was asked to run with no usable depth observation."""


NoSurface = mcubes.NoSurface


@dataclass
class DepthObservation:
    """One frame of fusion input: depth (+ optional uncertainty) and pose."""

    frame_id: int
    depth: DepthMap
    intrinsics: CameraIntrinsics
    cam_to_world: Transform
    uncertainty: UncertaintyMap | None = None
    color: np.ndarray | None = None  # (H, W, 3) in [0, 1], optional

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.values.shape != shape:
            raise ValueError("depth dimensions do not match intrinsics")
        if self.uncertainty is not None and self.uncertainty.values.shape != shape:
            raise ValueError("uncertainty dimensions do not match intrinsics")


@dataclass
class FusionParams:
    """Fusion policy knobs (weighting, truncation, sequence-level cutoffs).

    truncation_mode: "fixed" uses tau mm everywhere; "per_pixel_sigma" uses
    sigma_multiplier * sigma(pixel) so uncertain pixels get a gentler slope.
    weight_mode: "constant_one" or "inverse_uncertainty".
    Percentile cutoffs (0, 100) invalidate pixels above the sequence-global
    uncertainty / depth percentile before fusion.
    """

    truncation_mode: str = "fixed"
    tau: float = 2.0
    sigma_multiplier: float = 3.0
    weight_mode: str = "constant_one"
    uncertainty_percentile_cutoff: float | None = None
    depth_percentile_cutoff: float | None = None
    max_weight: float = 100.0

    def __post_init__(self):
        if self.truncation_mode not in ("fixed", "per_pixel_sigma"):
            raise ValueError(f"unknown truncation_mode {self.truncation_mode!r}")
        if self.weight_mode not in ("constant_one", "inverse_uncertainty"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.tau <= 0 or self.sigma_multiplier <= 0 or self.max_weight <= 0:
            raise ValueError("tau, sigma_multiplier and max_weight must be > 0")
        for cut in (self.uncertainty_percentile_cutoff, self.depth_percentile_cutoff):
            if cut is not None and not (0 < cut < 100):
                raise ValueError("percentile cutoffs must lie in (0, 100)")

    def needs_uncertainty(self) -> bool:
        return (
            self.truncation_mode == "per_pixel_sigma"
            or self.weight_mode == "inverse_uncertainty"
            or self.uncertainty_percentile_cutoff is not None
        )


@dataclass
class VolumeSpec:
    """Volume placement; origin/dims None means auto bounds from the data."""

    voxel_size: float = 0.5
    origin: np.ndarray | None = None
    dims: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be > 0")


class TsdfVolume:
    """Dense TSDF grid: values in [-1, 1], accumulated weights >= 0.

    Unobserved voxels (weight 0) carry the free-space sentinel value +1.
    """

    def __init__(self, origin, voxel_size: float, dims, with_color: bool = False):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        dims = tuple(int(d) for d in dims)
        if any(d <= 0 for d in dims):
            raise ValueError("volume dims must be positive")
        self.dims = dims
        self.tsdf = np.ones(dims, dtype=np.float64)
        self.weight = np.zeros(dims, dtype=np.float64)
        self.color = np.zeros(dims + (3,), dtype=np.float64) if with_color else None

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def voxel_centers_axis(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel_size

    def copy(self) -> "TsdfVolume":
        out = TsdfVolume(self.origin, self.voxel_size, self.dims, self.color is not None)
        out.tsdf[:] = self.tsdf
        out.weight[:] = self.weight
        if self.color is not None:
            out.color[:] = self.color
        return out


def truncated_distance(signed_distance, truncation_band):
    """Signed distance normalized by the band and clamped to [-1, 1]."""
    band = np.asarray(truncation_band, dtype=np.float64)
    if np.any(band <= 0):
        raise ValueError("truncation band must be > 0")
    return np.clip(np.asarray(signed_distance, dtype=np.float64) / band, -1.0, 1.0)


def compute_percentile_cutoffs(
    observations: list[DepthObservation], params: FusionParams
) -> tuple[float | None, float | None]:
    """Sequence-global uncertainty / depth cutoff values (or None)."""
    unc_cut = depth_cut = None
    if params.uncertainty_percentile_cutoff is not None:
        values = [
            obs.uncertainty.values[obs.depth.valid]
            for obs in observations
            if obs.uncertainty is not None
        ]
        if not values:
            raise NoValidObservations("uncertainty cutoff requires uncertainty maps")
        pooled = np.concatenate(values)
        if pooled.size:
            unc_cut = float(np.percentile(pooled, params.uncertainty_percentile_cutoff))
    if params.depth_percentile_cutoff is not None:
        pooled = np.concatenate([obs.depth.values[obs.depth.valid] for obs in observations])
        if pooled.size:
            depth_cut = float(np.percentile(pooled, params.depth_percentile_cutoff))
    return unc_cut, depth_cut


def apply_observation_filters(
    obs: DepthObservation,
    params: FusionParams,
    uncertainty_cutoff_value: float | None = None,
    depth_cutoff_value: float | None = None,
) -> DepthObservation:
    """Invalidate pixels above the cutoff values (ties kept).

    Cutoff values should come from compute_percentile_cutoffs over the whole
    sequence; when omitted they are computed from this observation alone.
    """
    if uncertainty_cutoff_value is None and depth_cutoff_value is None:
        if params.uncertainty_percentile_cutoff is None and params.depth_percentile_cutoff is None:
            return obs
        uncertainty_cutoff_value, depth_cutoff_value = compute_percentile_cutoffs([obs], params)
    drop = np.zeros(obs.depth.values.shape, dtype=bool)
    valid = obs.depth.valid
    if uncertainty_cutoff_value is not None and obs.uncertainty is not None:
        drop |= valid & (obs.uncertainty.values > uncertainty_cutoff_value)
    if depth_cutoff_value is not None:
        drop |= valid & (obs.depth.values > depth_cutoff_value)
    if not drop.any():
        return obs
    values = obs.depth.values.copy()
    values[drop] = np.nan
    return replace(obs, depth=DepthMap(values))


def filter_observations(
    observations: list[DepthObservation], params: FusionParams
) -> list[DepthObservation]:
    """Apply the sequence-global percentile filters to every observation."""
    if params.uncertainty_percentile_cutoff is None and params.depth_percentile_cutoff is None:
        return list(observations)
    unc_cut, depth_cut = compute_percentile_cutoffs(observations, params)
    return [apply_observation_filters(o, params, unc_cut, depth_cut) for o in observations]


@njit(cache=True, parallel=True)
def _integrate_kernel(tsdf, weight, origin, voxel_size, rot_wc, t_wc,
                      fx, fy, cx, cy, depth, sigma,
                      sigma_band, band_mult, fixed_band,
                      inv_sigma_weight, max_weight):
    nx, ny, nz = tsdf.shape
    height, width = depth.shape
    updated = 0
    for lin in prange(nx * ny * nz):
        i = lin // (ny * nz)
        j = (lin // nz) % ny
        k = lin % nz
        x = origin[0] + (i + 0.5) * voxel_size
        y = origin[1] + (j + 0.5) * voxel_size
        z = origin[2] + (k + 0.5) * voxel_size
        czx = rot_wc[0, 0] * x + rot_wc[0, 1] * y + rot_wc[0, 2] * z + t_wc[0]
        czy = rot_wc[1, 0] * x + rot_wc[1, 1] * y + rot_wc[1, 2] * z + t_wc[1]
        czz = rot_wc[2, 0] * x + rot_wc[2, 1] * y + rot_wc[2, 2] * z + t_wc[2]
        if czz <= 0.0:
            continue
        u = czx / czz * fx + cx
        v = czy / czz * fy + cy
        ui = np.int64(np.rint(u))
        vi = np.int64(np.rint(v))
        if ui < 0 or ui >= width or vi < 0 or vi >= height:
            continue
        d_obs = np.float64(depth[vi, ui])
        if not np.isfinite(d_obs):
            continue
        if sigma_band:
            band = band_mult * np.float64(sigma[vi, ui])
        else:
            band = fixed_band
        sd = d_obs - czz
        if sd < -band:
            continue
        d = sd / band
        if d > 1.0:
            d = 1.0
        elif d < -1.0:
            d = -1.0
        if inv_sigma_weight:
            w_i = 1.0 / np.float64(sigma[vi, ui])
        else:
            w_i = 1.0
        w_old = weight[i, j, k]
        w_new = w_old + w_i
        tsdf[i, j, k] = (tsdf[i, j, k] * w_old + d * w_i) / w_new
        weight[i, j, k] = min(w_new, max_weight)
        updated += 1
    return updated


@njit(cache=True, parallel=True)
def _integrate_color_kernel(colacc, weight_before, origin, voxel_size, rot_wc, t_wc,
                            fx, fy, cx, cy, depth, image, band, max_weight):
    nx, ny, nz = weight_before.shape
    height, width = depth.shape
    for lin in prange(nx * ny * nz):
        i = lin // (ny * nz)
        j = (lin // nz) % ny
        k = lin % nz
        x = origin[0] + (i + 0.5) * voxel_size
        y = origin[1] + (j + 0.5) * voxel_size
        z = origin[2] + (k + 0.5) * voxel_size
        czz = rot_wc[2, 0] * x + rot_wc[2, 1] * y + rot_wc[2, 2] * z + t_wc[2]
        if czz <= 0.0:
            continue
        czx = rot_wc[0, 0] * x + rot_wc[0, 1] * y + rot_wc[0, 2] * z + t_wc[0]
        czy = rot_wc[1, 0] * x + rot_wc[1, 1] * y + rot_wc[1, 2] * z + t_wc[1]
        u = czx / czz * fx + cx
        v = czy / czz * fy + cy
        ui = np.int64(np.rint(u))
        vi = np.int64(np.rint(v))
        if ui < 0 or ui >= width or vi < 0 or vi >= height:
            continue
        d_obs = np.float64(depth[vi, ui])
        if not np.isfinite(d_obs):
            continue
        if abs(d_obs - czz) > band:
            continue
        w_old = weight_before[i, j, k]
        for ch in range(3):
            colacc[i, j, k, ch] = (colacc[i, j, k, ch] * w_old + image[vi, ui, ch]) / (w_old + 1.0)


def _truncation_band(obs: DepthObservation, params: FusionParams) -> tuple[bool, float]:
    """(per-pixel-sigma flag, fixed band value)."""
    if params.truncation_mode == "per_pixel_sigma":
        if obs.uncertainty is None:
            raise ValueError("per_pixel_sigma truncation requires an uncertainty map")
        return True, 0.0
    return False, params.tau


def integrate(volume: TsdfVolume, obs: DepthObservation, params: FusionParams) -> int:
    """Fuse one observation into the volume in place; returns voxels updated.

    Logs a VolumeFrustumDisjoint warning when nothing was updated.
    """
    sigma_band, fixed_band = _truncation_band(obs, params)
    inv_w = params.weight_mode == "inverse_uncertainty"
    if inv_w and obs.uncertainty is None:
        raise ValueError("inverse_uncertainty weighting requires an uncertainty map")
    sigma = (
        obs.uncertainty.values
        if obs.uncertainty is not None
        else np.ones((1, 1), dtype=np.float32)
    )
    world_to_cam = obs.cam_to_world.inverse()
    k = obs.intrinsics
    weight_before = volume.weight.copy() if volume.color is not None and obs.color is not None else None
    updated = _integrate_kernel(
        volume.tsdf, volume.weight, volume.origin, volume.voxel_size,
        np.ascontiguousarray(world_to_cam.rotation),
        np.ascontiguousarray(world_to_cam.translation),
        k.fx, k.fy, k.cx, k.cy,
        obs.depth.values, sigma,
        sigma_band, params.sigma_multiplier, fixed_band,
        inv_w, params.max_weight,
    )
    if weight_before is not None:
        band = fixed_band if not sigma_band else params.sigma_multiplier * float(
            np.nanmedian(np.where(obs.depth.valid, sigma, np.nan))
        )
        _integrate_color_kernel(
            volume.color, weight_before, volume.origin, volume.voxel_size,
            np.ascontiguousarray(world_to_cam.rotation),
            np.ascontiguousarray(world_to_cam.translation),
            k.fx, k.fy, k.cx, k.cy,
            obs.depth.values, np.ascontiguousarray(obs.color, dtype=np.float64),
            band, params.max_weight,
        )
    if updated == 0:
        logger.warning(
            "VolumeFrustumDisjoint: observation %d updated no voxel", obs.frame_id
        )
    return int(updated)


def auto_volume_bounds(
    observations: list[DepthObservation], params: FusionParams, voxel_size: float
) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Bounds covering all backprojected valid depths plus one truncation band."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    margin = 0.0
    for obs in observations:
        valid = obs.depth.valid
        if not valid.any():
            continue
        vv, uu = np.nonzero(valid)
        pix = np.stack([uu.astype(np.float64), vv.astype(np.float64)], axis=1)
        pts = backproject(pix, obs.depth.values[valid].astype(np.float64),
                          obs.intrinsics, obs.cam_to_world)
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
        if params.truncation_mode == "per_pixel_sigma" and obs.uncertainty is not None:
            band = params.sigma_multiplier * float(obs.uncertainty.values[valid].max())
        else:
            band = params.tau
        margin = max(margin, band)
    if not np.all(np.isfinite(lo)):
        raise NoValidObservations("no valid depth pixel in any observation")
    lo -= margin + voxel_size
    hi += margin + voxel_size
    dims = tuple(int(np.ceil((hi[a] - lo[a]) / voxel_size)) + 1 for a in range(3))
    return lo, dims


def fuse_sequence(
    observations: list[DepthObservation],
    params: FusionParams,
    spec: VolumeSpec | None = None,
) -> TsdfVolume:
    """Filter and integrate all observations in frame order; deterministic."""
    if not observations:
        raise NoValidObservations("empty observation list")
    spec = spec or VolumeSpec()
    observations = sorted(observations, key=lambda o: o.frame_id)
    observations = filter_observations(observations, params)
    if spec.origin is None or spec.dims is None:
        origin, dims = auto_volume_bounds(observations, params, spec.voxel_size)
    else:
        origin, dims = spec.origin, spec.dims
    with_color = any(o.color is not None for o in observations)
    volume = TsdfVolume(origin, spec.voxel_size, dims, with_color=with_color)
    total = 0
    for obs in observations:
        total += integrate(volume, obs, params)
    logger.info(
        "fused %d observation(s), %d voxel updates into %s volume",
        len(observations), total, "x".join(map(str, dims)),
    )
    if total == 0:
        raise NoValidObservations("no observation updated any voxel")
    return volume


def extract_surface(volume: TsdfVolume, largest_component: bool = False) -> TriangleMesh:
    """Marching-cubes zero isosurface over observed voxels only.

    Cells touching any unobserved voxel are skipped; raises NoSurface when
    no observed zero crossing exists.
    """
    mesh = mcubes.extract_isosurface(
        volume.tsdf,
        observed=volume.weight > 0,
        origin=volume.origin + 0.5 * volume.voxel_size,
        spacing=volume.voxel_size,
    )
    if volume.color is not None and mesh.n_vertices:
        idx = np.clip(
            np.floor((mesh.vertices - volume.origin) / volume.voxel_size).astype(np.int64),
            0,
            np.array(volume.dims) - 1,
        )
        mesh.colors = volume.color[idx[:, 0], idx[:, 1], idx[:, 2]]
    if largest_component:
        mesh = mesh.largest_component()
    return mesh
