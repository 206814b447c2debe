"""Indexed triangle meshes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


class EmptyMesh(ValueError):
    """Mesh with no triangles where geometry is required."""


@dataclass
class TriangleMesh:
    """Triangle surface: vertices (N, 3) mm, triangles (M, 3) vertex indices.

    ``colors`` is optional per-vertex RGB in [0, 1], shape (N, 3).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices contain non-finite coordinates")
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("colors must be per-vertex")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_corners(self) -> np.ndarray:
        """(M, 3, 3) corner coordinates."""
        return self.vertices[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        c = self.triangle_corners()
        cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def enclosed_volume(self) -> float:
        """Signed enclosed volume via the divergence theorem (mm^3)."""
        c = self.triangle_corners()
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    def drop_degenerate(self) -> "TriangleMesh":
        """Remove triangles with exactly zero area; logs the dropped count."""
        areas = self.triangle_areas()
        keep = areas > 0.0
        dropped = int((~keep).sum())
        if dropped:
            logger.info("dropped %d degenerate triangle(s)", dropped)
        return TriangleMesh(self.vertices, self.triangles[keep], self.colors)

    def transformed(self, t) -> "TriangleMesh":
        """Apply a rigid/similarity transform to every vertex; topology unchanged."""
        return TriangleMesh(t.apply(self.vertices), self.triangles.copy(), self.colors)

    def largest_component(self) -> "TriangleMesh":
        """Keep only the largest edge-connected triangle component."""
        if self.n_triangles == 0:
            return self
        parent = np.arange(self.n_vertices)

        def find(i: int) -> int:
            root = i
            while parent[root] != root:
                root = parent[root]
            while parent[i] != root:
                parent[i], i = root, parent[i]
            return root

        for a, b, c in self.triangles:
            ra, rb, rc = find(a), find(b), find(c)
            parent[rb] = ra
            parent[rc] = ra
        roots = np.array([find(i) for i in self.triangles[:, 0]])
        values, counts = np.unique(roots, return_counts=True)
        keep = roots == values[np.argmax(counts)]
        return TriangleMesh(self.vertices, self.triangles[keep], self.colors)


def apply_transform(t, mesh: TriangleMesh) -> TriangleMesh:
    """Map every mesh vertex through the transform (surface registration step)."""
    return mesh.transformed(t)
