"""Shared helpers: random transforms, simple meshes, brute-force oracles."""

from __future__ import annotations

import numpy as np
import pytest

from reconbench.geometry import RigidTransform, SimilarityTransform
from reconbench.mesh import TriangleMesh


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_rigid(rng: np.random.Generator, trans_scale: float = 100.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.normal(scale=trans_scale, size=3))


def random_similarity(rng: np.random.Generator, trans_scale: float = 100.0) -> SimilarityTransform:
    return SimilarityTransform(
        float(rng.uniform(0.5, 2.0)), random_rotation(rng),
        rng.normal(scale=trans_scale, size=3))


def square_mesh(z: float = 50.0, half: float = 200.0) -> TriangleMesh:
    """Two triangles forming a square at the given z, fronto-parallel."""
    vertices = np.array([
        [-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    triangles = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(vertices, triangles)


def icosphere(radius: float = 1.0, center=(0.0, 0.0, 0.0), subdivisions: int = 3) -> TriangleMesh:
    """Subdivided icosahedron projected to the sphere."""
    phi = (1 + np.sqrt(5)) / 2
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        new_faces = []
        vlist = list(verts)

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in edge_mid:
                m = vlist[a] + vlist[b]
                m = m / np.linalg.norm(m)
                edge_mid[key] = len(vlist)
                vlist.append(m)
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    return TriangleMesh(verts * radius + np.asarray(center), faces)


def random_triangle_soup(rng: np.random.Generator, n: int, extent: float = 100.0,
                         tri_size: float = 8.0) -> TriangleMesh:
    centers = rng.uniform(-extent, extent, size=(n, 1, 3))
    offsets = rng.normal(scale=tri_size, size=(n, 3, 3))
    corners = (centers + offsets).reshape(-1, 3)
    return TriangleMesh(corners, np.arange(3 * n).reshape(-1, 3))


def brute_force_ray_hits(mesh: TriangleMesh, origins: np.ndarray,
                         directions: np.ndarray, t_min: float = 1e-9):
    """Vectorized Moller-Trumbore over every triangle; nearest t and id."""
    c = mesh.triangle_corners()
    v0, e1, e2 = c[:, 0], c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]
    ts = np.full(len(origins), np.inf)
    ids = np.full(len(origins), -1, dtype=np.int64)
    for i, (o, d) in enumerate(zip(origins, directions)):
        p = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, p)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tvec = o - v0
            u = np.einsum("ij,ij->i", tvec, p) * inv
            q = np.cross(tvec, e1)
            v = np.einsum("ij,j->i", q, d) * inv
            t = np.einsum("ij,ij->i", e2, q) * inv
        ok = (det != 0) & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > t_min)
        if ok.any():
            cand = np.where(ok, t, np.inf)
            best = int(np.argmin(cand))  # lowest index wins ties
            ts[i] = cand[best]
            ids[i] = best
    return ts, ids


def brute_force_point_mesh(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Exact min distance point->triangle over all triangles (numpy, per point)."""
    corners = mesh.triangle_corners()

    def point_tri(p, tri):
        a, b, c = tri
        ab, ac, ap = b - a, c - a, p - a
        d1, d2 = ab @ ap, ac @ ap
        if d1 <= 0 and d2 <= 0:
            q = a
        else:
            bp = p - b
            d3, d4 = ab @ bp, ac @ bp
            if d3 >= 0 and d4 <= d3:
                q = b
            else:
                vc = d1 * d4 - d3 * d2
                if vc <= 0 and d1 >= 0 and d3 <= 0:
                    q = a + ab * (d1 / (d1 - d3))
                else:
                    cp = p - c
                    d5, d6 = ab @ cp, ac @ cp
                    if d6 >= 0 and d5 <= d6:
                        q = c
                    else:
                        vb = d5 * d2 - d1 * d6
                        if vb <= 0 and d2 >= 0 and d6 <= 0:
                            q = a + ac * (d2 / (d2 - d6))
                        else:
                            va = d3 * d6 - d5 * d4
                            if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
                                w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                                q = b + w * (c - b)
                            else:
                                denom = va + vb + vc
                                q = a + ab * (vb / denom) + ac * (vc / denom)
        return np.linalg.norm(p - q)

    return np.array([
        min(point_tri(p, corners[t]) for t in range(len(corners))) for p in points
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
