"""Depth-map rendering by BVH ray casting, and keypoint reprojection.

The accelerator is a flat median-split BVH over triangles; the same index
answers nearest-hit ray queries (depth rendering), closest-point queries
(point-to-mesh distances), hit counting (containment tests), so it is shared
by the metrics and phantom modules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .geometry import CameraIntrinsics, Transform, backproject
from .mesh import EmptyMesh, TriangleMesh

_LEAF_SIZE = 4
_STACK_DEPTH = 96


class StrideTooLarge(ValueError):
    """Grid stride leaves fewer than 4 keypoints."""


def set_threads(n: int) -> None:
    """Limit numba worker threads for all kernels in this package."""
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@dataclass
class DepthMap:
    """Per-pixel plane depth in mm; NaN marks invalid pixels."""

    values: np.ndarray  # (height, width) float32

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("depth map must be 2-D")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy())


@dataclass
class UncertaintyMap:
    """Per-pixel depth standard deviation in mm (same layout as DepthMap)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("uncertainty map must be 2-D")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "UncertaintyMap":
        return UncertaintyMap(self.values.copy())


class MeshAccelerator:
    """Immutable BVH over a triangle mesh; shareable across threads."""

    def __init__(self, mesh: TriangleMesh):
        if mesh.n_triangles == 0:
            raise EmptyMesh("cannot build an accelerator over an empty mesh")
        self.mesh = mesh
        corners = mesh.triangle_corners()
        (
            self.node_bmin,
            self.node_bmax,
            self.node_child,
            self.node_start,
            self.node_count,
            order,
        ) = _build_bvh(corners)
        tri = corners[order]
        self.tri_v0 = np.ascontiguousarray(tri[:, 0])
        self.tri_e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
        self.tri_e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
        self.tri_id = np.ascontiguousarray(order, dtype=np.int64)

    def ray_hits(self, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest hit parameter t (inf on miss) and triangle index (-1 on miss).

        ``t`` is in units of the (unnormalized) direction vectors.
        """
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        return _ray_batch(
            self.node_bmin, self.node_bmax, self.node_child,
            self.node_start, self.node_count,
            self.tri_v0, self.tri_e1, self.tri_e2, self.tri_id,
            origins, directions,
        )

    def count_hits(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Number of intersections with t > 0 per ray (for parity/containment)."""
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        return _count_batch(
            self.node_bmin, self.node_bmax, self.node_child,
            self.node_start, self.node_count,
            self.tri_v0, self.tri_e1, self.tri_e2,
            origins, directions,
        )

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Inside/outside test for a closed mesh by ray-crossing parity."""
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        # irrational-ish direction avoids hitting lattice-aligned edges
        d = np.tile(np.array([0.57130923, 0.33222195, 0.75048794]), (len(points), 1))
        return self.count_hits(points, d) % 2 == 1

    def closest_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(distances, closest surface points) for each query point."""
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        return _closest_batch(
            self.node_bmin, self.node_bmax, self.node_child,
            self.node_start, self.node_count,
            self.tri_v0, self.tri_e1, self.tri_e2,
            points,
        )


def build_accelerator(mesh: TriangleMesh) -> MeshAccelerator:
    return MeshAccelerator(mesh)


def _build_bvh(corners: np.ndarray):
    """Median-split BVH; returns flat node arrays plus the triangle order."""
    n = len(corners)
    tri_bmin = corners.min(axis=1)
    tri_bmax = corners.max(axis=1)
    centroids = corners.mean(axis=1)
    order = np.arange(n, dtype=np.int64)

    node_bmin, node_bmax, node_child, node_start, node_count = [], [], [], [], []

    def new_node(lo: int, hi: int) -> int:
        idx = order[lo:hi]
        node_bmin.append(tri_bmin[idx].min(axis=0))
        node_bmax.append(tri_bmax[idx].max(axis=0))
        node_child.append(-1)
        node_start.append(lo)
        node_count.append(hi - lo)
        return len(node_child) - 1

    stack = [(new_node(0, n), 0, n)]
    while stack:
        node, lo, hi = stack.pop()
        if hi - lo <= _LEAF_SIZE:
            continue
        idx = order[lo:hi]
        cen = centroids[idx]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        mid = (hi - lo) // 2
        sub = np.argpartition(cen[:, axis], mid)
        order[lo:hi] = idx[sub]
        left = new_node(lo, lo + mid)
        right = new_node(lo + mid, hi)
        assert right == left + 1
        node_child[node] = left
        node_start[node] = -1
        node_count[node] = 0
        stack.append((left, lo, lo + mid))
        stack.append((right, lo + mid, hi))

    return (
        np.ascontiguousarray(node_bmin, dtype=np.float64),
        np.ascontiguousarray(node_bmax, dtype=np.float64),
        np.asarray(node_child, dtype=np.int64),
        np.asarray(node_start, dtype=np.int64),
        np.asarray(node_count, dtype=np.int64),
        order,
    )


@njit(cache=True, inline="always", error_model="numpy")
def _slab_hit(bmin, bmax, ox, oy, oz, ix, iy, iz, tmax):
    """Ray/AABB slab test; returns entry t or inf when missed."""
    t1 = (bmin[0] - ox) * ix
    t2 = (bmax[0] - ox) * ix
    tlo = min(t1, t2)
    thi = max(t1, t2)
    t1 = (bmin[1] - oy) * iy
    t2 = (bmax[1] - oy) * iy
    tlo = max(tlo, min(t1, t2))
    thi = min(thi, max(t1, t2))
    t1 = (bmin[2] - oz) * iz
    t2 = (bmax[2] - oz) * iz
    tlo = max(tlo, min(t1, t2))
    thi = min(thi, max(t1, t2))
    if thi >= tlo and tlo <= tmax and thi >= 0.0:
        return tlo
    return np.inf


@njit(cache=True, inline="always")
def _tri_hit(v0, e1, e2, ox, oy, oz, dx, dy, dz):
    """Moller-Trumbore without back-face culling; returns t or inf."""
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if det == 0.0:
        return np.inf
    inv = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    return (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv


@njit(cache=True, error_model="numpy")
def _ray_nearest(node_bmin, node_bmax, node_child, node_start, node_count,
                 tri_v0, tri_e1, tri_e2, tri_id,
                 ox, oy, oz, dx, dy, dz, t_min):
    ix = 1.0 / dx
    iy = 1.0 / dy
    iz = 1.0 / dz
    best_t = np.inf
    best_id = np.int64(-1)
    stack = np.empty(_STACK_DEPTH, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _slab_hit(node_bmin[node], node_bmax[node], ox, oy, oz, ix, iy, iz, best_t) == np.inf:
            continue
        child = node_child[node]
        if child < 0:
            s = node_start[node]
            for k in range(s, s + node_count[node]):
                t = _tri_hit(tri_v0[k], tri_e1[k], tri_e2[k], ox, oy, oz, dx, dy, dz)
                if t > t_min:
                    if t < best_t or (t == best_t and tri_id[k] < best_id):
                        best_t = t
                        best_id = tri_id[k]
        else:
            # near child last so it pops first
            ta = _slab_hit(node_bmin[child], node_bmax[child], ox, oy, oz, ix, iy, iz, best_t)
            tb = _slab_hit(node_bmin[child + 1], node_bmax[child + 1], ox, oy, oz, ix, iy, iz, best_t)
            if ta <= tb:
                if tb < np.inf:
                    stack[top] = child + 1
                    top += 1
                stack[top] = child
                top += 1
            else:
                stack[top] = child
                top += 1
                stack[top] = child + 1
                top += 1
    return best_t, best_id


@njit(cache=True, parallel=True, error_model="numpy")
def _ray_batch(node_bmin, node_bmax, node_child, node_start, node_count,
               tri_v0, tri_e1, tri_e2, tri_id, origins, directions):
    n = origins.shape[0]
    ts = np.empty(n, dtype=np.float64)
    ids = np.empty(n, dtype=np.int64)
    for i in prange(n):
        t, tid = _ray_nearest(
            node_bmin, node_bmax, node_child, node_start, node_count,
            tri_v0, tri_e1, tri_e2, tri_id,
            origins[i, 0], origins[i, 1], origins[i, 2],
            directions[i, 0], directions[i, 1], directions[i, 2], 1e-9,
        )
        ts[i] = t
        ids[i] = tid
    return ts, ids


@njit(cache=True, parallel=True, error_model="numpy")
def _count_batch(node_bmin, node_bmax, node_child, node_start, node_count,
                 tri_v0, tri_e1, tri_e2, origins, directions):
    n = origins.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    for i in prange(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = directions[i, 0], directions[i, 1], directions[i, 2]
        ix = 1.0 / dx
        iy = 1.0 / dy
        iz = 1.0 / dz
        c = 0
        stack = np.empty(_STACK_DEPTH, dtype=np.int64)
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _slab_hit(node_bmin[node], node_bmax[node], ox, oy, oz, ix, iy, iz, np.inf) == np.inf:
                continue
            child = node_child[node]
            if child < 0:
                s = node_start[node]
                for k in range(s, s + node_count[node]):
                    t = _tri_hit(tri_v0[k], tri_e1[k], tri_e2[k], ox, oy, oz, dx, dy, dz)
                    if np.isfinite(t) and t > 1e-12:
                        c += 1
            else:
                stack[top] = child
                top += 1
                stack[top] = child + 1
                top += 1
        counts[i] = c
    return counts


@njit(cache=True, inline="always")
def _closest_on_tri(v0, e1, e2, px, py, pz):
    """Closest point on a triangle (Ericson's region walk on barycentrics)."""
    dx = px - v0[0]
    dy = py - v0[1]
    dz = pz - v0[2]
    d1 = e1[0] * dx + e1[1] * dy + e1[2] * dz
    d2 = e2[0] * dx + e2[1] * dy + e2[2] * dz
    a = e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]
    b = e1[0] * e2[0] + e1[1] * e2[1] + e1[2] * e2[2]
    c = e2[0] * e2[0] + e2[1] * e2[1] + e2[2] * e2[2]
    if d1 <= 0.0 and d2 <= 0.0:
        s = 0.0
        t = 0.0
    else:
        d3 = d1 - a
        d4 = d2 - b
        if d3 >= 0.0 and d4 <= d3:
            s = 1.0
            t = 0.0
        else:
            d5 = d1 - b
            d6 = d2 - c
            vc = d1 * d4 - d3 * d2
            if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                s = d1 / (d1 - d3) if d1 != d3 else 0.0
                t = 0.0
            elif d6 >= 0.0 and d5 <= d6:
                s = 0.0
                t = 1.0
            else:
                vb = d5 * d2 - d1 * d6
                if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                    s = 0.0
                    t = d2 / (d2 - d6) if d2 != d6 else 0.0
                else:
                    va = d3 * d6 - d5 * d4
                    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                        s = 1.0 - w
                        t = w
                    else:
                        denom = 1.0 / (va + vb + vc)
                        s = vb * denom
                        t = vc * denom
    qx = v0[0] + s * e1[0] + t * e2[0]
    qy = v0[1] + s * e1[1] + t * e2[1]
    qz = v0[2] + s * e1[2] + t * e2[2]
    d2q = (qx - px) ** 2 + (qy - py) ** 2 + (qz - pz) ** 2
    return d2q, qx, qy, qz


@njit(cache=True, inline="always")
def _aabb_dist2(bmin, bmax, px, py, pz):
    d = 0.0
    if px < bmin[0]:
        d += (bmin[0] - px) ** 2
    elif px > bmax[0]:
        d += (px - bmax[0]) ** 2
    if py < bmin[1]:
        d += (bmin[1] - py) ** 2
    elif py > bmax[1]:
        d += (py - bmax[1]) ** 2
    if pz < bmin[2]:
        d += (bmin[2] - pz) ** 2
    elif pz > bmax[2]:
        d += (pz - bmax[2]) ** 2
    return d


@njit(cache=True, parallel=True)
def _closest_batch(node_bmin, node_bmax, node_child, node_start, node_count,
                   tri_v0, tri_e1, tri_e2, points):
    n = points.shape[0]
    dists = np.empty(n, dtype=np.float64)
    closest = np.empty((n, 3), dtype=np.float64)
    for i in prange(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        bx = by = bz = 0.0
        stack = np.empty(_STACK_DEPTH, dtype=np.int64)
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _aabb_dist2(node_bmin[node], node_bmax[node], px, py, pz) >= best:
                continue
            child = node_child[node]
            if child < 0:
                s = node_start[node]
                for k in range(s, s + node_count[node]):
                    d2, qx, qy, qz = _closest_on_tri(tri_v0[k], tri_e1[k], tri_e2[k], px, py, pz)
                    if d2 < best:
                        best = d2
                        bx, by, bz = qx, qy, qz
            else:
                da = _aabb_dist2(node_bmin[child], node_bmax[child], px, py, pz)
                db = _aabb_dist2(node_bmin[child + 1], node_bmax[child + 1], px, py, pz)
                if da <= db:
                    stack[top] = child + 1
                    top += 1
                    stack[top] = child
                    top += 1
                else:
                    stack[top] = child
                    top += 1
                    stack[top] = child + 1
                    top += 1
        dists[i] = np.sqrt(best)
        closest[i, 0] = bx
        closest[i, 1] = by
        closest[i, 2] = bz
    return dists, closest


@njit(cache=True, parallel=True, error_model="numpy")
def _render_kernel(node_bmin, node_bmax, node_child, node_start, node_count,
                   tri_v0, tri_e1, tri_e2, tri_id,
                   rot, center, fx, fy, cx, cy, width, height):
    out = np.empty((height, width), dtype=np.float32)
    for row in prange(height):
        for col in range(width):
            # unnormalized camera ray with z = 1: hit parameter equals plane depth
            rx = (col - cx) / fx
            ry = (row - cy) / fy
            dx = rot[0, 0] * rx + rot[0, 1] * ry + rot[0, 2]
            dy = rot[1, 0] * rx + rot[1, 1] * ry + rot[1, 2]
            dz = rot[2, 0] * rx + rot[2, 1] * ry + rot[2, 2]
            t, tid = _ray_nearest(
                node_bmin, node_bmax, node_child, node_start, node_count,
                tri_v0, tri_e1, tri_e2, tri_id,
                center[0], center[1], center[2], dx, dy, dz, 1e-9,
            )
            out[row, col] = np.float32(t) if tid >= 0 else np.float32(np.nan)
    return out


def render_depth(acc: MeshAccelerator, intrinsics: CameraIntrinsics, cam_to_world: Transform) -> DepthMap:
    """Ray-cast a plane-depth map of the indexed mesh from the given camera.

    Hits both triangle orientations; pixels whose ray misses are NaN.
    Deterministic: identical inputs give bit-identical maps.
    """
    values = _render_kernel(
        acc.node_bmin, acc.node_bmax, acc.node_child, acc.node_start, acc.node_count,
        acc.tri_v0, acc.tri_e1, acc.tri_e2, acc.tri_id,
        np.ascontiguousarray(cam_to_world.rotation),
        np.ascontiguousarray(cam_to_world.translation),
        intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
        intrinsics.width, intrinsics.height,
    )
    return DepthMap(values)


@njit(cache=True, parallel=True, error_model="numpy")
def _render_pixels_kernel(node_bmin, node_bmax, node_child, node_start, node_count,
                          tri_v0, tri_e1, tri_e2, tri_id,
                          rot, center, fx, fy, cx, cy, rows, cols):
    n = rows.shape[0]
    out = np.empty(n, dtype=np.float32)
    for i in prange(n):
        rx = (cols[i] - cx) / fx
        ry = (rows[i] - cy) / fy
        dx = rot[0, 0] * rx + rot[0, 1] * ry + rot[0, 2]
        dy = rot[1, 0] * rx + rot[1, 1] * ry + rot[1, 2]
        dz = rot[2, 0] * rx + rot[2, 1] * ry + rot[2, 2]
        t, tid = _ray_nearest(
            node_bmin, node_bmax, node_child, node_start, node_count,
            tri_v0, tri_e1, tri_e2, tri_id,
            center[0], center[1], center[2], dx, dy, dz, 1e-9,
        )
        out[i] = np.float32(t) if tid >= 0 else np.float32(np.nan)
    return out


def render_depth_sparse(
    acc: MeshAccelerator,
    intrinsics: CameraIntrinsics,
    cam_to_world: Transform,
    keypoints: np.ndarray,
) -> DepthMap:
    """Depth map populated only at the pixels bilinear keypoint lookups touch.

    Per-pixel values are bit-identical to render_depth; everything else is
    NaN, so reproject_keypoints gives exactly the same result at a fraction
    of the ray budget.
    """
    keypoints = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    w, h = intrinsics.width, intrinsics.height
    u = np.clip(keypoints[:, 0], 0.0, w - 1.0)
    v = np.clip(keypoints[:, 1], 0.0, h - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    cols = np.concatenate([u0, u1, u0, u1])
    rows = np.concatenate([v0, v0, v1, v1])
    lin = np.unique(rows * w + cols)
    rows = (lin // w).astype(np.float64)
    cols = (lin % w).astype(np.float64)
    values = _render_pixels_kernel(
        acc.node_bmin, acc.node_bmax, acc.node_child, acc.node_start, acc.node_count,
        acc.tri_v0, acc.tri_e1, acc.tri_e2, acc.tri_id,
        np.ascontiguousarray(cam_to_world.rotation),
        np.ascontiguousarray(cam_to_world.translation),
        intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
        rows, cols,
    )
    full = np.full((h, w), np.nan, dtype=np.float32)
    full[rows.astype(np.int64), cols.astype(np.int64)] = values
    return DepthMap(full)


def sample_grid_keypoints(intrinsics: CameraIntrinsics, stride: float) -> np.ndarray:
    """Regular row-major pixel grid with half-stride margins, (N, 2) floats."""
    if stride < 1:
        raise ValueError("stride must be >= 1 pixel")
    n_u = int(intrinsics.width // stride)
    n_v = int(intrinsics.height // stride)
    if n_u * n_v < 4:
        raise StrideTooLarge(
            f"stride {stride} yields {n_u * n_v} keypoint(s) on "
            f"{intrinsics.width}x{intrinsics.height}, need >= 4"
        )
    off_u = (intrinsics.width - n_u * stride) / 2.0
    off_v = (intrinsics.height - n_v * stride) / 2.0
    us = off_u + (np.arange(n_u) + 0.5) * stride
    vs = off_v + (np.arange(n_v) + 0.5) * stride
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def interpolate_depth(
    depth: DepthMap, pixels: np.ndarray, discontinuity_threshold: float = 5.0
) -> np.ndarray:
    """Bilinear depth at sub-pixel locations using valid neighbors only.

    Returns NaN where no valid neighbor exists or where the valid 4-neighbor
    depth range exceeds ``discontinuity_threshold`` (silhouette guard).
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    h, w = depth.values.shape
    u = np.clip(pixels[:, 0], 0.0, w - 1.0)
    v = np.clip(pixels[:, 1], 0.0, h - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0

    d = np.stack(
        [
            depth.values[v0, u0],
            depth.values[v0, u1],
            depth.values[v1, u0],
            depth.values[v1, u1],
        ],
        axis=0,
    ).astype(np.float64)
    wgt = np.stack(
        [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=0
    )
    ok = np.isfinite(d)
    wgt = np.where(ok, wgt, 0.0)
    wsum = wgt.sum(axis=0)
    dmax = np.nanmax(np.where(ok, d, -np.inf), axis=0)
    dmin = np.nanmin(np.where(ok, d, np.inf), axis=0)
    out = np.where(
        (wsum > 0) & (dmax - dmin <= discontinuity_threshold),
        (np.where(ok, d, 0.0) * wgt).sum(axis=0) / np.where(wsum > 0, wsum, 1.0),
        np.nan,
    )
    return out


def reproject_keypoints(
    depth: DepthMap,
    keypoints: np.ndarray,
    intrinsics: CameraIntrinsics,
    cam_to_world: Transform,
    discontinuity_threshold: float = 5.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Lift keypoints through the depth map to world points.

    Returns (kept_indices, points): indices into ``keypoints`` whose
    interpolated depth is valid, and the backprojected world points.
    """
    keypoints = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    if len(keypoints) and not np.all(intrinsics.contains(keypoints)):
        raise ValueError("keypoint(s) outside image bounds")
    depths = interpolate_depth(depth, keypoints, discontinuity_threshold)
    kept = np.flatnonzero(np.isfinite(depths) & (depths > 0))
    if kept.size == 0:
        return kept, np.empty((0, 3))
    points = backproject(keypoints[kept], depths[kept], intrinsics, cam_to_world)
    return kept, points
