"""Isosurface extraction at level 0 from a sampled scalar grid.

Cube-by-cube contour walking: marching-squares segments are built on each
cube face (with the asymptotic decider resolving ambiguous faces from the
actual bilinear values, so adjacent cubes always agree and the surface never
cracks), stitched into loops, and fan-triangulated. Linear interpolation
along edges, hence exact on linear fields. Cells with any unobserved corner
are skipped entirely.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .mesh import TriangleMesh


class NoSurface(ValueError):
    """The observed region contains no zero crossing."""


# corner c sits at offset (c & 1, c >> 1 & 1, c >> 2 & 1)
_EDGE_A = np.array([0, 2, 4, 6, 0, 1, 4, 5, 0, 1, 2, 3], dtype=np.int64)
_EDGE_B = np.array([1, 3, 5, 7, 2, 3, 6, 7, 4, 5, 6, 7], dtype=np.int64)

# corners A,B,C,D counter-clockwise seen from outside; edges for AB,BC,CD,DA
_FACE_CORNERS = np.array(
    [
        [0, 2, 3, 1],  # z = 0
        [4, 5, 7, 6],  # z = 1
        [0, 1, 5, 4],  # y = 0
        [2, 6, 7, 3],  # y = 1
        [0, 4, 6, 2],  # x = 0
        [1, 3, 7, 5],  # x = 1
    ],
    dtype=np.int64,
)
_FACE_EDGES = np.array(
    [
        [4, 1, 5, 0],
        [2, 7, 3, 6],
        [0, 9, 2, 8],
        [10, 3, 11, 1],
        [8, 6, 10, 4],
        [5, 11, 7, 9],
    ],
    dtype=np.int64,
)

_CORNER_DX = np.array([c & 1 for c in range(8)], dtype=np.float64)
_CORNER_DY = np.array([(c >> 1) & 1 for c in range(8)], dtype=np.float64)
_CORNER_DZ = np.array([(c >> 2) & 1 for c in range(8)], dtype=np.float64)


@njit(cache=True)
def _cube_triangles(v, base_x, base_y, base_z, out, n_out):
    """Emit triangles for one cube into out[n_out:]; returns new count."""
    neg = np.empty(8, dtype=np.bool_)
    any_neg = False
    any_pos = False
    for c in range(8):
        neg[c] = v[c] < 0.0
        any_neg |= neg[c]
        any_pos |= not neg[c]
    if not (any_neg and any_pos):
        return n_out

    # edge crossings with linear interpolation (exact for linear fields)
    cross_x = np.empty(12)
    cross_y = np.empty(12)
    cross_z = np.empty(12)
    has_cross = np.zeros(12, dtype=np.bool_)
    for e in range(12):
        a = _EDGE_A[e]
        b = _EDGE_B[e]
        if neg[a] != neg[b]:
            t = v[a] / (v[a] - v[b])
            has_cross[e] = True
            cross_x[e] = base_x + _CORNER_DX[a] + t * (_CORNER_DX[b] - _CORNER_DX[a])
            cross_y[e] = base_y + _CORNER_DY[a] + t * (_CORNER_DY[b] - _CORNER_DY[a])
            cross_z[e] = base_z + _CORNER_DZ[a] + t * (_CORNER_DZ[b] - _CORNER_DZ[a])

    # directed contour segments per face: from the (+ -> -) crossing to a
    # (- -> +) crossing, ambiguous faces resolved by the bilinear saddle sign
    nxt = np.full(12, -1, dtype=np.int64)
    slot_edge = np.empty(4, dtype=np.int64)
    slot_entering = np.empty(4, dtype=np.bool_)
    for f in range(6):
        n_crossings = 0
        for s in range(4):
            ca = _FACE_CORNERS[f, s]
            cb = _FACE_CORNERS[f, (s + 1) % 4]
            if neg[ca] != neg[cb]:
                slot_edge[n_crossings] = _FACE_EDGES[f, s]
                slot_entering[n_crossings] = not neg[ca]
                n_crossings += 1
        if n_crossings == 2:
            if slot_entering[0]:
                nxt[slot_edge[0]] = slot_edge[1]
            else:
                nxt[slot_edge[1]] = slot_edge[0]
        elif n_crossings == 4:
            va = v[_FACE_CORNERS[f, 0]]
            vb = v[_FACE_CORNERS[f, 1]]
            vc = v[_FACE_CORNERS[f, 2]]
            vd = v[_FACE_CORNERS[f, 3]]
            num = va * vc - vb * vd
            den = va + vc - vb - vd
            saddle_positive = True if den == 0.0 else (num / den) >= 0.0
            for s in range(4):
                if slot_entering[s]:
                    partner = (s + 1) % 4 if saddle_positive else (s - 1) % 4
                    nxt[slot_edge[s]] = slot_edge[partner]

    # follow loops, fan-triangulate
    loop = np.empty(12, dtype=np.int64)
    visited = np.zeros(12, dtype=np.bool_)
    for start in range(12):
        if nxt[start] < 0 or visited[start]:
            continue
        m = 0
        e = start
        while True:
            loop[m] = e
            m += 1
            visited[e] = True
            e = nxt[e]
            if e == start:
                break
        for i in range(1, m - 1):
            p0 = loop[0]
            p1 = loop[i]
            p2 = loop[i + 1]
            out[n_out, 0, 0] = cross_x[p0]
            out[n_out, 0, 1] = cross_y[p0]
            out[n_out, 0, 2] = cross_z[p0]
            out[n_out, 1, 0] = cross_x[p1]
            out[n_out, 1, 1] = cross_y[p1]
            out[n_out, 1, 2] = cross_z[p1]
            out[n_out, 2, 0] = cross_x[p2]
            out[n_out, 2, 1] = cross_y[p2]
            out[n_out, 2, 2] = cross_z[p2]
            n_out += 1
    return n_out


@njit(cache=True, parallel=True)
def _extract_chunk(field, ci, cj, ck):
    n = ci.shape[0]
    out = np.empty((n, 12, 3, 3), dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    v = np.empty((n, 8), dtype=np.float64)
    for q in prange(n):
        i, j, k = ci[q], cj[q], ck[q]
        for c in range(8):
            v[q, c] = field[i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)]
        counts[q] = _cube_triangles(v[q], float(i), float(j), float(k), out[q], 0)
    return out, counts


def extract_isosurface(
    field: np.ndarray,
    observed: np.ndarray | None = None,
    origin: np.ndarray | None = None,
    spacing: float = 1.0,
) -> TriangleMesh:
    """Zero level set of ``field`` sampled at lattice points.

    ``observed`` masks lattice points; cells touching any unobserved point
    are skipped. Lattice point (i, j, k) sits at origin + (i, j, k)*spacing.
    Triangles are wound with normals pointing toward positive field values.
    Raises NoSurface when no observed cell crosses zero.
    """
    field = np.ascontiguousarray(field, dtype=np.float64)
    neg = field < 0

    def corners_all(a):
        return (
            a[:-1, :-1, :-1] & a[1:, :-1, :-1] & a[:-1, 1:, :-1] & a[1:, 1:, :-1]
            & a[:-1, :-1, 1:] & a[1:, :-1, 1:] & a[:-1, 1:, 1:] & a[1:, 1:, 1:]
        )

    def corners_any(a):
        return (
            a[:-1, :-1, :-1] | a[1:, :-1, :-1] | a[:-1, 1:, :-1] | a[1:, 1:, :-1]
            | a[:-1, :-1, 1:] | a[1:, :-1, 1:] | a[:-1, 1:, 1:] | a[1:, 1:, 1:]
        )

    active = corners_any(neg) & ~corners_all(neg)
    if observed is not None:
        active &= corners_all(np.ascontiguousarray(observed, dtype=bool))
    ci, cj, ck = np.nonzero(active)
    if ci.size == 0:
        raise NoSurface("no zero crossing between observed lattice points")

    pieces = []
    chunk = 1 << 16
    for lo in range(0, ci.size, chunk):
        out, counts = _extract_chunk(
            field,
            np.ascontiguousarray(ci[lo:lo + chunk]),
            np.ascontiguousarray(cj[lo:lo + chunk]),
            np.ascontiguousarray(ck[lo:lo + chunk]),
        )
        for q in np.nonzero(counts)[0]:
            pieces.append(out[q, : counts[q]])
    if not pieces:
        raise NoSurface("no zero crossing between observed lattice points")
    tris = np.concatenate(pieces, axis=0)  # (T, 3, 3) corner positions

    # weld: interpolation on a shared lattice edge is bit-identical in every
    # adjacent cube, so exact-equality dedup yields an indexed watertight mesh
    flat = tris.reshape(-1, 3)
    view = flat.view([("x", "f8"), ("y", "f8"), ("z", "f8")]).ravel()
    uniq, inverse = np.unique(view, return_inverse=True)
    vertices = uniq.view(np.float64).reshape(-1, 3)
    triangles = inverse.reshape(-1, 3)

    if origin is not None or spacing != 1.0:
        org = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
        vertices = org + vertices * spacing
    return TriangleMesh(vertices, triangles).drop_degenerate()
