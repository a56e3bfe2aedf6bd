"""2D predicates and the NDC/pixel coordinate convention.

NDC is the [-1,1]^2 frame, y up, origin at the viewport center. Column c,
row r of a WxH raster has its center at x = (2c+1)/W - 1, y = 1 - (2r+1)/H.
All rasterization and keypoint conversions go through these helpers so the
convention lives in one place.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def pixel_centers_ndc(width: int, height: int) -> tuple[Array, Array]:
    """Per-axis NDC coordinates of pixel centers: (x of columns, y of rows)."""
    xs = (2.0 * np.arange(width) + 1.0) / width - 1.0
    ys = 1.0 - (2.0 * np.arange(height) + 1.0) / height
    return xs, ys


def ndc_to_pixel(pts: Array, width: int, height: int) -> Array:
    """NDC points (N,2) -> fractional pixel (col,row) coordinates."""
    pts = np.asarray(pts, dtype=np.float64)
    col = (pts[..., 0] + 1.0) * width / 2.0 - 0.5
    row = (1.0 - pts[..., 1]) * height / 2.0 - 0.5
    return np.stack([col, row], axis=-1)


def pixel_to_ndc(pix: Array, width: int, height: int) -> Array:
    """Fractional pixel (col,row) coordinates -> NDC points (N,2)."""
    pix = np.asarray(pix, dtype=np.float64)
    x = (2.0 * pix[..., 0] + 1.0) / width - 1.0
    y = 1.0 - (2.0 * pix[..., 1] + 1.0) / height
    return np.stack([x, y], axis=-1)


def polygon_area(poly: Array) -> float:
    """Signed shoelace area; positive for counter-clockwise winding."""
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def triangle_area(a, b, c) -> float:
    """Signed area of triangle abc."""
    return 0.5 * float((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def barycentric(tri: Array, pts: Array) -> Array:
    """Barycentric coordinates of pts (N,2) w.r.t. triangle tri (3,2).

    Works for either winding; degenerate triangles yield NaN.
    """
    a, b, c = tri[0], tri[1], tri[2]
    m00, m01 = a[0] - c[0], b[0] - c[0]
    m10, m11 = a[1] - c[1], b[1] - c[1]
    det = m00 * m11 - m01 * m10
    px = pts[..., 0] - c[0]
    py = pts[..., 1] - c[1]
    b0 = (m11 * px - m01 * py) / det
    b1 = (-m10 * px + m00 * py) / det
    return np.stack([b0, b1, 1.0 - b0 - b1], axis=-1)


def points_in_polygon(poly: Array, pts: Array) -> Array:
    """Even-odd crossing test, vectorized over pts (N,2). Boundary points
    are resolved by the half-open edge rule (consistent, not symmetric)."""
    poly = np.asarray(poly, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    inside = np.zeros(x.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < np.where(crosses, xint, np.inf))
    return inside


def segments_properly_intersect(p1, p2, q1, q2, eps: float = 1e-12) -> bool:
    """True if open segments p1p2 and q1q2 cross or overlap collinearly."""
    d1 = triangle_area(q1, q2, p1)
    d2 = triangle_area(q1, q2, p2)
    d3 = triangle_area(p1, p2, q1)
    d4 = triangle_area(p1, p2, q2)
    if ((d1 > eps and d2 < -eps) or (d1 < -eps and d2 > eps)) and \
       ((d3 > eps and d4 < -eps) or (d3 < -eps and d4 > eps)):
        return True
    # collinear overlap
    if abs(d1) <= eps and abs(d2) <= eps and abs(d3) <= eps and abs(d4) <= eps:
        lo = max(min(p1[0], p2[0]), min(q1[0], q2[0]))
        hi = min(max(p1[0], p2[0]), max(q1[0], q2[0]))
        lo_y = max(min(p1[1], p2[1]), min(q1[1], q2[1]))
        hi_y = min(max(p1[1], p2[1]), max(q1[1], q2[1]))
        return hi - lo > eps or hi_y - lo_y > eps
    return False


def point_segment_distance(pts: Array, a: Array, b: Array) -> tuple[Array, Array]:
    """Distance from pts (...,2) to segment ab, plus the projection parameter
    t in [0,1] of the closest point a + t(b-a)."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        d = np.linalg.norm(pts - a, axis=-1)
        return d, np.zeros(pts.shape[:-1])
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(pts - closest, axis=-1), t


def point_triangle_distance(tri: Array, pts: Array) -> Array:
    """Distance from pts (N,2) to a filled triangle (0 inside)."""
    bary = barycentric(tri, pts)
    inside = np.all(bary >= 0.0, axis=-1) & np.all(bary <= 1.0, axis=-1)
    d = np.full(pts.shape[:-1], np.inf)
    for i in range(3):
        di, _ = point_segment_distance(pts, tri[i], tri[(i + 1) % 3])
        d = np.minimum(d, di)
    return np.where(inside, 0.0, d)


def closest_point_on_triangle(tri: Array, q: Array) -> tuple[Array, float]:
    """Closest point of a filled triangle to q, with its distance."""
    b = barycentric(tri, q)
    if np.all(np.isfinite(b)) and np.all(b >= 0.0):
        return np.asarray(q, dtype=np.float64).copy(), 0.0
    best_d = np.inf
    best_p = tri[0]
    for i in range(3):
        a, c = tri[i], tri[(i + 1) % 3]
        d, t = point_segment_distance(np.asarray(q, dtype=np.float64), a, c)
        if d < best_d:
            best_d = float(d)
            best_p = a + t * (c - a)
    return best_p, best_d
