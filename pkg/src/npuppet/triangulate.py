"""Ear-clipping triangulation of simple polygons, with optional uniform
midpoint refinement down to a maximum edge length."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .geometry import polygon_area, segments_properly_intersect, triangle_area

_EPS = 1e-12


def check_simple_polygon(outline: np.ndarray, name: str = "outline") -> np.ndarray:
    """Validate a polygon outline: >=3 vertices, finite, no repeated
    consecutive vertices, nonzero area, no self-intersection. Returns the
    outline as float64 with counter-clockwise winding."""
    poly = np.asarray(outline, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2:
        raise ValidationError(f"{name}: expected shape (N,2), got {poly.shape}")
    n = len(poly)
    if n < 3:
        raise ValidationError(f"{name}: polygon needs at least 3 vertices, got {n}")
    if not np.all(np.isfinite(poly)):
        raise ValidationError(f"{name}: non-finite coordinates")
    for i in range(n):
        if np.allclose(poly[i], poly[(i + 1) % n], atol=_EPS):
            raise ValidationError(f"{name}: zero-length edge at vertex {i}")
    # intersection before area: a symmetric bowtie has zero signed area, but
    # the self-intersection is the actionable diagnosis
    for i in range(n):
        a0, a1 = poly[i], poly[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            b0, b1 = poly[j], poly[(j + 1) % n]
            if segments_properly_intersect(a0, a1, b0, b1):
                raise ValidationError(
                    f"{name}: self-intersecting outline, edge {i}-{(i + 1) % n} "
                    f"crosses edge {j}-{(j + 1) % n}"
                )
    area = polygon_area(poly)
    if abs(area) < 1e-12:
        raise ValidationError(f"{name}: polygon has zero area")
    if area < 0:
        poly = poly[::-1].copy()
    return poly


def _is_ear(poly: np.ndarray, idx: list[int], k: int) -> bool:
    n = len(idx)
    a = poly[idx[(k - 1) % n]]
    b = poly[idx[k]]
    c = poly[idx[(k + 1) % n]]
    if triangle_area(a, b, c) <= _EPS:
        return False
    # no other remaining vertex may sit inside (or on) the candidate ear
    for m in range(n):
        if m in ((k - 1) % n, k, (k + 1) % n):
            continue
        p = poly[idx[m]]
        d0 = triangle_area(a, b, p)
        d1 = triangle_area(b, c, p)
        d2 = triangle_area(c, a, p)
        if d0 >= -_EPS and d1 >= -_EPS and d2 >= -_EPS:
            return False
    return True


def ear_clip(outline: np.ndarray, name: str = "outline") -> tuple[np.ndarray, np.ndarray]:
    """Triangulate a simple polygon. Returns (vertices (N,2), faces (N-2,3))
    with counter-clockwise faces indexing the outline vertices in order."""
    poly = check_simple_polygon(outline, name)
    n = len(poly)
    idx = list(range(n))
    faces: list[tuple[int, int, int]] = []
    guard = 0
    while len(idx) > 3:
        clipped = False
        for k in range(len(idx)):
            if _is_ear(poly, idx, k):
                m = len(idx)
                faces.append((idx[(k - 1) % m], idx[k], idx[(k + 1) % m]))
                idx.pop(k)
                clipped = True
                break
        if not clipped:
            # fall back to the least-bad ear so near-degenerate outlines
            # still produce a mesh instead of looping forever
            areas = [
                triangle_area(
                    poly[idx[(k - 1) % len(idx)]],
                    poly[idx[k]],
                    poly[idx[(k + 1) % len(idx)]],
                )
                for k in range(len(idx))
            ]
            k = int(np.argmax(areas))
            m = len(idx)
            faces.append((idx[(k - 1) % m], idx[k], idx[(k + 1) % m]))
            idx.pop(k)
        guard += 1
        if guard > 4 * n:
            raise ValidationError(f"{name}: triangulation failed to terminate")
    faces.append((idx[0], idx[1], idx[2]))
    return poly.copy(), np.asarray(faces, dtype=np.int64)


def refine_to_edge_length(
    vertices: np.ndarray, faces: np.ndarray, max_edge: float
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform midpoint subdivision until no edge exceeds max_edge.

    Every round splits every edge, so the mesh stays conforming; a round
    quarters every face. Capped at 8 rounds to bound blowup from tiny
    thresholds."""
    if max_edge <= 0:
        raise ValidationError(f"max_edge must be positive, got {max_edge}")
    v, f = np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64)
    for _ in range(8):
        edges = v[f[:, [0, 1, 2]]] - v[f[:, [1, 2, 0]]]
        if float(np.max(np.linalg.norm(edges, axis=-1))) <= max_edge:
            return v, f
        v, f = midpoint_subdivide(v, f)
    return v, f


def midpoint_subdivide(
    vertices: np.ndarray, faces: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One round of 1-to-4 midpoint subdivision. New midpoint vertices are
    appended after the originals; face k expands to faces 4k..4k+3, so any
    contiguous face range [a,b) maps to [4a,4b)."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    mid_index: dict[tuple[int, int], int] = {}
    new_v = [v]
    next_id = len(v)

    def midpoint(i: int, j: int) -> int:
        nonlocal next_id
        key = (min(i, j), max(i, j))
        if key not in mid_index:
            mid_index[key] = next_id
            new_v.append(0.5 * (v[key[0]] + v[key[1]])[None, :])
            next_id += 1
        return mid_index[key]

    out = np.empty((4 * len(f), 3), dtype=np.int64)
    for k, (a, b, c) in enumerate(f):
        mab = midpoint(int(a), int(b))
        mbc = midpoint(int(b), int(c))
        mca = midpoint(int(c), int(a))
        out[4 * k + 0] = (a, mab, mca)
        out[4 * k + 1] = (mab, b, mbc)
        out[4 * k + 2] = (mca, mbc, c)
        out[4 * k + 3] = (mab, mbc, mca)
    return np.concatenate(new_v, axis=0), out
