"""Differentiable layered 2D rasterizer.

Two passes share one coordinate convention. The hard pass paints faces back
to front at pixel centers and produces the crisp output image, the strict
{0,1} coverage mask, and per-pixel provenance. The soft pass replaces each
connected component's binary coverage with its Gaussian blur, which equals
the erf profile 0.5*(1+erf(sd/sigma)) of the signed silhouette distance
along straight boundary spans and rounds smoothly through corners, making
the composited image a smooth function of the vertices; training losses and
finite-difference checks run on the soft pass. The analytic backward gives
exact interior gradients (barycentric interpolation, bilinear texture
lookup) and Gaussian-screened silhouette gradients whose influence decays
within a few sigma of the silhouette.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError, ValidationError
from .geometry import barycentric, pixel_centers_ndc, point_segment_distance
from .puppet import DeformState, Puppet, _vertex_components, face_layer_ids

_BAND_SIGMAS = 4.0  # gradient support; the blur is saturated beyond this


@dataclass(frozen=True)
class RasterConfig:
    """Raster geometry. sigma is the silhouette softness in NDC units; None
    picks 1.5 pixel pitches (pitch = 2/width)."""

    width: int = 256
    height: int = 256
    sigma: float | None = None
    background: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)


def validate_config(cfg: RasterConfig) -> None:
    if cfg.width < 8 or cfg.height < 8:
        raise ValidationError(
            f"raster size must be at least 8x8, got {cfg.width}x{cfg.height}"
        )
    if cfg.sigma is not None and not cfg.sigma > 0:
        raise ValidationError(f"sigma must be positive, got {cfg.sigma}")
    if len(cfg.background) != 4:
        raise ValidationError("background must be an RGBA 4-tuple")


def resolve_sigma(cfg: RasterConfig) -> float:
    return cfg.sigma if cfg.sigma is not None else 1.5 * (2.0 / cfg.width)


@dataclass(frozen=True)
class RenderOut:
    rgba: np.ndarray  # (H,W,4) in [0,1]
    mask: np.ndarray  # (H,W) strict {0,1}
    face: np.ndarray  # (H,W) int64 provenance, -1 where uncovered
    bary: np.ndarray  # (H,W,3)


# ---------------------------------------------------------------------------
# static mesh structure


def _components(p: Puppet) -> list[dict]:
    """Connected components as painter-ordered groups of global face ids,
    each with its topological boundary edges. Boundary edges keep the face
    winding direction (faces are counterclockwise, so the interior lies to
    the left of each directed edge)."""
    if p.n_faces == 0:
        return []
    roots = _vertex_components(p)
    fl = face_layer_ids(p)
    groups: dict[int, list[int]] = {}
    for k in range(p.n_faces):
        groups.setdefault(int(roots[p.faces[k, 0]]), []).append(k)
    comps = []
    for face_ids in groups.values():
        face_ids.sort()
        count: dict[tuple[int, int], int] = {}
        directed: dict[tuple[int, int], tuple[int, int]] = {}
        for k in face_ids:
            a, b, c = (int(x) for x in p.faces[k])
            for e in ((a, b), (b, c), (c, a)):
                key = (min(e), max(e))
                count[key] = count.get(key, 0) + 1
                directed[key] = e
        bedges = [directed[key] for key in sorted(count) if count[key] == 1]
        comps.append(
            {
                "faces": np.asarray(face_ids, dtype=np.int64),
                "bedges": np.asarray(bedges, dtype=np.int64).reshape(-1, 2),
                "layer": int(fl[face_ids[0]]),
            }
        )
    comps.sort(key=lambda c: (c["layer"], int(c["faces"][0])))
    return comps


def _pixel_grid(cfg: RasterConfig) -> np.ndarray:
    xs, ys = pixel_centers_ndc(cfg.width, cfg.height)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)  # (H,W,2)


def _col_range(x0: float, x1: float, w: int) -> tuple[int, int]:
    c0 = int(np.floor((x0 + 1.0) * w / 2.0 - 0.5))
    c1 = int(np.ceil((x1 + 1.0) * w / 2.0 - 0.5)) + 1
    return max(c0, 0), min(c1, w)


def _row_range(y0: float, y1: float, h: int) -> tuple[int, int]:
    # y decreases with row index
    r0 = int(np.floor((1.0 - y1) * h / 2.0 - 0.5))
    r1 = int(np.ceil((1.0 - y0) * h / 2.0 - 0.5)) + 1
    return max(r0, 0), min(r1, h)


def _component_raster(verts, p: Puppet, comp, pts):
    """Hard coverage of one component: topmost covering face per pixel."""
    h, w = pts.shape[:2]
    prov = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3), dtype=np.float64)
    for k in comp["faces"]:
        tri = verts[p.faces[k]]
        e1 = tri[1] - tri[0]
        e2 = tri[2] - tri[0]
        if abs(e1[0] * e2[1] - e1[1] * e2[0]) < 1e-14:
            continue  # degenerate face covers nothing
        c0, c1 = _col_range(tri[:, 0].min(), tri[:, 0].max(), w)
        r0, r1 = _row_range(tri[:, 1].min(), tri[:, 1].max(), h)
        if c0 >= c1 or r0 >= r1:
            continue
        sub = (slice(r0, r1), slice(c0, c1))
        b = barycentric(tri, pts[sub])
        m = np.all(b >= 0.0, axis=-1)
        prov[sub] = np.where(m, k, prov[sub])
        bary[sub] = np.where(m[..., None], b, bary[sub])
    return prov, bary


def _edge_slices(verts, bedges, band: float, shape):
    """Pixel-window slice per boundary edge (None when off screen)."""
    h, w = shape
    out = []
    for i, j in bedges:
        a, b = verts[int(i)], verts[int(j)]
        x0, x1 = min(a[0], b[0]) - band, max(a[0], b[0]) + band
        y0, y1 = min(a[1], b[1]) - band, max(a[1], b[1]) + band
        c0, c1 = _col_range(x0, x1, w)
        r0, r1 = _row_range(y0, y1, h)
        if c0 >= c1 or r0 >= r1:
            out.append(None)
        else:
            out.append((slice(r0, r1), slice(c0, c1)))
    return out


def _silhouette_field(verts, comp, pts, cover, band: float):
    """Per-pixel nearest boundary edge within the band: signed distance
    (positive inside the hard cover), edge index, projection parameter.
    Feeds texture lookups for band pixels; coverage softness comes from
    the Gaussian flux below, not from this field."""
    h, w = pts.shape[:2]
    dmin = np.full((h, w), np.inf)
    eidx = np.full((h, w), -1, dtype=np.int64)
    tpar = np.zeros((h, w), dtype=np.float64)
    slices = _edge_slices(verts, comp["bedges"], band, (h, w))
    for ei, (i, j) in enumerate(comp["bedges"]):
        sub = slices[ei]
        if sub is None:
            continue
        a, b = verts[int(i)], verts[int(j)]
        d, t = point_segment_distance(pts[sub], a, b)
        m = d < dmin[sub]
        dmin[sub] = np.where(m, d, dmin[sub])
        eidx[sub] = np.where(m, ei, eidx[sub])
        tpar[sub] = np.where(m, t, tpar[sub])
    sd = np.where(cover, dmin, -dmin)
    return sd, dmin, eidx, tpar


# ---------------------------------------------------------------------------
# soft coverage as an exact Gaussian blur of the coverage indicator
#
# Convolving the inside-the-component indicator with an isotropic Gaussian
# of width s = sigma/sqrt(2) reproduces 0.5*(1+erf(d/sigma)) across any
# straight boundary span, and is infinitely differentiable in the vertex
# positions (no seams at corners, no branch flips at the silhouette). By the
# divergence theorem the blur equals a sum of per-edge fluxes of the radial
# field F(r) = r*(1-exp(-|r|^2/2s^2))/(2*pi*|r|^2), whose divergence is the
# Gaussian. Each flux splits into a closed-form subtended-angle term and a
# smooth remainder integrated with fixed Gauss-Legendre nodes; because the
# backward pass differentiates the exact quadrature sum, finite differences
# of the rendered image agree with the analytic gradient at machine
# precision. Pixels farther than the band from every edge keep the hard
# cover bit, so coverage is exactly 0 or 1 there.


def _blur_width(sigma: float) -> float:
    return sigma / math.sqrt(2.0)


def _g_kernel(z: np.ndarray, s: float) -> np.ndarray:
    """(1 - exp(-z/2s^2)) / (2 pi z), series-continued at z=0."""
    w = z / (2.0 * s * s)
    small = w < 1e-8
    zs = np.where(small, 1.0, z)
    return np.where(
        small,
        (1.0 - 0.5 * w) / (4.0 * math.pi * s * s),
        -np.expm1(-w) / (2.0 * math.pi * zs),
    )


def _gp_kernel(z: np.ndarray, s: float) -> np.ndarray:
    """d/dz of _g_kernel, series-continued at z=0."""
    w = z / (2.0 * s * s)
    small = w < 1e-6
    zs = np.where(small, 1.0, z)
    return np.where(
        small,
        (-0.5 + w / 3.0) / (8.0 * math.pi * s**4),
        (zs * np.exp(-w) / (2.0 * s * s) + np.expm1(-w)) / (2.0 * math.pi * zs * zs),
    )


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)


def _edge_quad_nodes(length: float, s: float):
    """Gauss-Legendre nodes/weights on [0,1], chunked to the blur scale."""
    nch = max(1, int(np.ceil(length / s)))
    ts = ((_GL_NODES[None, :] + 1.0) * 0.5 + np.arange(nch)[:, None]) / nch
    ws = np.tile(_GL_WEIGHTS * 0.5 / nch, nch)
    return ts.ravel(), ws


def _subtended_angle(d0, d1):
    """Signed angle (in turns) subtended at the pixel by the edge, plus the
    pieces its gradient needs."""
    c = d0[..., 0] * d1[..., 1] - d0[..., 1] * d1[..., 0]
    d = np.sum(d0 * d1, axis=-1)
    ang = np.arctan2(c, d) / (2.0 * math.pi)
    return ang, c, d


def _flux_coverage(verts, comp, pts, cover, band: float, s: float) -> np.ndarray:
    """Gaussian-blurred coverage of one component."""
    m = cover.astype(np.float64)
    h, w = pts.shape[:2]
    slices = _edge_slices(verts, comp["bedges"], band, (h, w))
    for ei, (i, j) in enumerate(comp["bedges"]):
        sub = slices[ei]
        if sub is None:
            continue
        a, b = verts[int(i)], verts[int(j)]
        e = b - a
        length = float(np.hypot(e[0], e[1]))
        if length < 1e-14:
            continue
        q = pts[sub].reshape(-1, 2)
        pl = (a[0] - q[:, 0]) * e[1] - (a[1] - q[:, 1]) * e[0]
        tk, wk = _edge_quad_nodes(length, s)
        r = a + tk[:, None, None] * e - q[None]  # (K,P,2)
        z = np.sum(r * r, axis=-1)
        quad = np.einsum("k,kp->p", wk, _g_kernel(z, s))
        ang, _, _ = _subtended_angle(a - q, b - q)
        m[sub] += (pl * quad - ang).reshape(pts[sub].shape[:2])
    return m


# ---------------------------------------------------------------------------
# texture lookup


def bilinear_sample(tex: np.ndarray, uv: np.ndarray):
    """Sample tex (Ht,Wt,C) at uv (N,2) in [0,1] with clamp-to-edge.

    Returns (values (N,C), d/dpx (N,C), d/dpy (N,C)) where px,py are the
    continuous pixel coordinates uv * (dim - 1)."""
    ht, wt = tex.shape[:2]
    px = np.clip(uv[:, 0] * (wt - 1), 0.0, wt - 1)
    py = np.clip(uv[:, 1] * (ht - 1), 0.0, ht - 1)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, max(wt - 2, 0))
    y0 = np.clip(np.floor(py).astype(np.int64), 0, max(ht - 2, 0))
    x1 = np.minimum(x0 + 1, wt - 1)
    y1 = np.minimum(y0 + 1, ht - 1)
    fx = (px - x0)[:, None]
    fy = (py - y0)[:, None]
    v00, v01 = tex[y0, x0], tex[y0, x1]
    v10, v11 = tex[y1, x0], tex[y1, x1]
    val = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    dpx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    dpy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    return val, dpx, dpy


def _face_uv(p: Puppet, prov_flat: np.ndarray, bary_flat: np.ndarray) -> np.ndarray:
    vidx = p.faces[prov_flat]  # (N,3)
    uvv = p.uv[vidx]  # (N,3,2)
    return np.einsum("nk,nkd->nd", bary_flat, uvv)


# ---------------------------------------------------------------------------
# hard pass


def _check_state(p: Puppet, s: DeformState) -> np.ndarray:
    v = np.asarray(s.vertices, dtype=np.float64)
    if v.shape != (p.n_vertices, 2):
        raise ValidationError(
            f"state has shape {v.shape}, puppet needs ({p.n_vertices},2)"
        )
    if not np.all(np.isfinite(v)):
        raise ValidationError("deform state contains non-finite coordinates")
    return v


def render(s: DeformState, p: Puppet, cfg: RasterConfig) -> RenderOut:
    """Crisp forward render: painter's order at pixel centers, bilinear
    texture lookup, coverage overwrites the background."""
    validate_config(cfg)
    verts = _check_state(p, s)
    pts = _pixel_grid(cfg)
    h, w = cfg.height, cfg.width
    prov = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3), dtype=np.float64)
    for comp in _components(p):
        cp, cb = _component_raster(verts, p, comp, pts)
        m = cp >= 0
        prov = np.where(m, cp, prov)
        bary = np.where(m[..., None], cb, bary)
    cover = prov >= 0
    bg = np.asarray(cfg.background, dtype=np.float64)
    rgba = np.empty((h, w, 4), dtype=np.float64)
    rgba[:] = bg
    if cover.any():
        uvq = _face_uv(p, prov[cover], bary[cover])
        col, _, _ = bilinear_sample(p.texture[..., :3], uvq)
        rgba[cover, :3] = col
        rgba[cover, 3] = 1.0
    mask = cover.astype(np.float64)
    return RenderOut(rgba=rgba, mask=mask, face=prov, bary=bary)


def render_mask(s: DeformState, p: Puppet, cfg: RasterConfig) -> np.ndarray:
    """The render with an all-ones texture over a zero background: the
    strict {0,1} coverage mask."""
    validate_config(cfg)
    verts = _check_state(p, s)
    pts = _pixel_grid(cfg)
    cover = np.zeros((cfg.height, cfg.width), dtype=bool)
    for comp in _components(p):
        cp, _ = _component_raster(verts, p, comp, pts)
        cover |= cp >= 0
    return cover.astype(np.float64)


# ---------------------------------------------------------------------------
# soft pass


@dataclass
class _CompCtx:
    faces: np.ndarray
    bedges: np.ndarray
    cover: np.ndarray  # (H,W) bool
    prov: np.ndarray  # (H,W) int64
    bary: np.ndarray  # (H,W,3)
    sd: np.ndarray  # (H,W) signed nearest-edge distance, +-inf off band
    dmin: np.ndarray  # (H,W) unsigned nearest-edge distance
    eidx: np.ndarray  # (H,W) int64
    tpar: np.ndarray  # (H,W)
    m_soft: np.ndarray  # (H,W)
    color: np.ndarray  # (H,W,3)
    band_out: np.ndarray  # (H,W) bool, uncovered pixels colored from an edge


@dataclass
class _SoftCtx:
    verts: np.ndarray
    p: Puppet
    cfg: RasterConfig
    sigma: float
    blur: float
    pts: np.ndarray
    comps: list[_CompCtx]
    prefix_rgb: list[np.ndarray]  # composite before component k
    prefix_a: list[np.ndarray]
    rgba: np.ndarray


def _soft_forward(verts: np.ndarray, p: Puppet, cfg: RasterConfig) -> _SoftCtx:
    validate_config(cfg)
    if not np.all(np.isfinite(verts)):
        raise ValidationError("deform state contains non-finite coordinates")
    sigma = resolve_sigma(cfg)
    blur = _blur_width(sigma)
    band = _BAND_SIGMAS * sigma
    pts = _pixel_grid(cfg)
    h, w = cfg.height, cfg.width
    comp_ctxs = []
    for comp in _components(p):
        prov, bary = _component_raster(verts, p, comp, pts)
        cover = prov >= 0
        sd, dmin, eidx, tpar = _silhouette_field(verts, comp, pts, cover, band)
        m_soft = _flux_coverage(verts, comp, pts, cover, band, blur)
        color = np.zeros((h, w, 3), dtype=np.float64)
        if cover.any():
            uvq = _face_uv(p, prov[cover], bary[cover])
            color[cover], _, _ = bilinear_sample(p.texture[..., :3], uvq)
        band_out = (~cover) & (eidx >= 0) & (sd > -band)
        if band_out.any():
            ii = comp["bedges"][eidx[band_out]]  # (N,2) vertex ids
            tt = tpar[band_out][:, None]
            uv_e = (1.0 - tt) * p.uv[ii[:, 0]] + tt * p.uv[ii[:, 1]]
            color[band_out], _, _ = bilinear_sample(p.texture[..., :3], uv_e)
        comp_ctxs.append(
            _CompCtx(
                faces=comp["faces"], bedges=comp["bedges"], cover=cover,
                prov=prov, bary=bary, sd=sd, dmin=dmin, eidx=eidx,
                tpar=tpar, m_soft=m_soft, color=color, band_out=band_out,
            )
        )
    bg = np.asarray(cfg.background, dtype=np.float64)
    out_rgb = np.broadcast_to(bg[:3], (h, w, 3)).copy()
    out_a = np.full((h, w), bg[3], dtype=np.float64)
    prefix_rgb, prefix_a = [], []
    for c in comp_ctxs:
        prefix_rgb.append(out_rgb.copy())
        prefix_a.append(out_a.copy())
        m = c.m_soft[..., None]
        out_rgb = c.color * m + out_rgb * (1.0 - m)
        out_a = c.m_soft + out_a * (1.0 - c.m_soft)
    rgba = np.concatenate([out_rgb, out_a[..., None]], axis=-1)
    return _SoftCtx(
        verts=verts, p=p, cfg=cfg, sigma=sigma, blur=blur, pts=pts,
        comps=comp_ctxs, prefix_rgb=prefix_rgb, prefix_a=prefix_a, rgba=rgba,
    )


def _perp(w: np.ndarray) -> np.ndarray:
    return np.stack([w[..., 1], -w[..., 0]], axis=-1)


def _scatter_bary_color(grad, p, verts, pts, c: _CompCtx, d_color):
    """Interior color gradients: through bilinear lookup and the barycentric
    coordinates' dependence on the face vertices."""
    sel = c.cover & np.any(d_color != 0.0, axis=-1)
    if not sel.any():
        return
    prov = c.prov[sel]
    b = c.bary[sel]  # (N,3)
    q = pts[sel]  # (N,2)
    dc = d_color[sel]  # (N,3)
    vidx = p.faces[prov]  # (N,3)
    tri = verts[vidx]  # (N,3,2)
    uvv = p.uv[vidx]  # (N,3,2)
    uvq = np.einsum("nk,nkd->nd", b, uvv)
    tex = p.texture[..., :3]
    ht, wt = tex.shape[:2]
    _, dpx, dpy = bilinear_sample(tex, uvq)
    gpx = np.sum(dc * dpx, axis=-1)
    gpy = np.sum(dc * dpy, axis=-1)
    guv = np.stack([gpx * (wt - 1), gpy * (ht - 1)], axis=-1)  # (N,2)
    db = np.einsum("nd,nkd->nk", guv, uvv)  # (N,3)

    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = v1 - v0, v2 - v0
    dd = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]  # (N,)
    dD = np.stack([_perp(v1 - v2), _perp(v2 - v0), -_perp(v1 - v0)], axis=1)
    zero = np.zeros_like(v0)
    dN = np.empty((len(q), 3, 3, 2))  # [pixel, bary i, vertex j, 2]
    dN[:, 0, 0], dN[:, 0, 1], dN[:, 0, 2] = zero, _perp(v2 - q), -_perp(v1 - q)
    dN[:, 1, 0], dN[:, 1, 1], dN[:, 1, 2] = -_perp(v2 - q), zero, _perp(v0 - q)
    dN[:, 2, 0], dN[:, 2, 1], dN[:, 2, 2] = _perp(v1 - q), -_perp(v0 - q), zero
    # d b_i / d v_j = (dN_ij - b_i dD_j) / D
    db_dv = (dN - b[:, :, None, None] * dD[:, None, :, :]) / dd[:, None, None, None]
    gv = np.einsum("ni,nijd->njd", db, db_dv)  # (N,3,2)
    np.add.at(grad, vidx.ravel(), gv.reshape(-1, 2))


def _scatter_edge_color(grad, p, verts, pts, c: _CompCtx, d_color):
    """Band color gradients: the nearest-edge projection parameter moves
    with the edge endpoints, dragging the sampled UV along the edge."""
    sel = c.band_out & np.any(d_color != 0.0, axis=-1)
    if not sel.any():
        return
    ii = c.bedges[c.eidx[sel]]  # (N,2)
    a = verts[ii[:, 0]]
    b = verts[ii[:, 1]]
    q = pts[sel]
    t = c.tpar[sel]
    dc = d_color[sel]
    e = b - a
    ee = np.sum(e * e, axis=-1)
    t_raw = np.sum((q - a) * e, axis=-1) / np.maximum(ee, 1e-300)
    interior = (t_raw > 0.0) & (t_raw < 1.0) & (ee > 1e-24)
    if not interior.any():
        return
    uv_a = p.uv[ii[:, 0]]
    uv_b = p.uv[ii[:, 1]]
    uv_e = (1.0 - t[:, None]) * uv_a + t[:, None] * uv_b
    tex = p.texture[..., :3]
    ht, wt = tex.shape[:2]
    _, dpx, dpy = bilinear_sample(tex, uv_e)
    gpx = np.sum(dc * dpx, axis=-1)
    gpy = np.sum(dc * dpy, axis=-1)
    guv = np.stack([gpx * (wt - 1), gpy * (ht - 1)], axis=-1)
    dt = np.sum(guv * (uv_b - uv_a), axis=-1)  # (N,)
    qa = q - a
    qa_e = np.sum(qa * e, axis=-1)
    dt_da = (-(e + qa) * ee[:, None] + 2.0 * e * qa_e[:, None]) / (ee**2)[:, None]
    dt_db = (qa * ee[:, None] - 2.0 * e * qa_e[:, None]) / (ee**2)[:, None]
    wsel = np.where(interior, dt, 0.0)[:, None]
    np.add.at(grad, ii[:, 0], wsel * dt_da)
    np.add.at(grad, ii[:, 1], wsel * dt_db)


def _scatter_coverage(grad, verts, pts, c: _CompCtx, d_m, sigma):
    """Coverage gradients: each component's blurred coverage depends on the
    vertices only through the per-edge flux terms, so route d_m through the
    quadrature sum and the subtended angle for every edge in turn."""
    band = _BAND_SIGMAS * sigma
    s = _blur_width(sigma)
    h, w = d_m.shape
    slices = _edge_slices(verts, c.bedges, band, (h, w))
    for ei, (i, j) in enumerate(c.bedges):
        sub = slices[ei]
        if sub is None:
            continue
        u = d_m[sub].ravel()
        live = u != 0.0
        if not live.any():
            continue
        a, b = verts[int(i)], verts[int(j)]
        e = b - a
        length = float(np.hypot(e[0], e[1]))
        if length < 1e-14:
            continue
        q = pts[sub].reshape(-1, 2)[live]
        u = u[live]
        pl = (a[0] - q[:, 0]) * e[1] - (a[1] - q[:, 1]) * e[0]
        tk, wk = _edge_quad_nodes(length, s)
        r = a + tk[:, None, None] * e - q[None]  # (K,P,2)
        z = np.sum(r * r, axis=-1)
        quad = np.einsum("k,kp->p", wk, _g_kernel(z, s))
        gp = _gp_kernel(z, s)
        dq_da = 2.0 * np.einsum("k,kp,kpd->pd", wk, gp, r * (1.0 - tk)[:, None, None])
        dq_db = 2.0 * np.einsum("k,kp,kpd->pd", wk, gp, r * tk[:, None, None])
        d0 = a - q
        d1 = b - q
        _, cr, dt = _subtended_angle(d0, d1)
        den = 2.0 * math.pi * np.maximum(cr * cr + dt * dt, 1e-300)
        da_da = (dt[:, None] * _perp(d1) - cr[:, None] * d1) / den[:, None]
        da_db = (-dt[:, None] * _perp(d0) - cr[:, None] * d0) / den[:, None]
        dpl_da = _perp(e) + _perp(d0)
        dpl_db = -_perp(d0)
        g_a = dpl_da * quad[:, None] + pl[:, None] * dq_da - da_da
        g_b = dpl_db * quad[:, None] + pl[:, None] * dq_db - da_db
        grad[int(i)] += np.einsum("p,pd->d", u, g_a)
        grad[int(j)] += np.einsum("p,pd->d", u, g_b)


def _soft_backward(ctx: _SoftCtx, upstream: np.ndarray) -> np.ndarray:
    """Route dLoss/dPixels (H,W,4) back to dLoss/dVertices (V,2)."""
    h, w = ctx.cfg.height, ctx.cfg.width
    if upstream.shape != (h, w, 4):
        raise ShapeError(
            f"render backward expects upstream ({h},{w},4), got {upstream.shape}"
        )
    grad = np.zeros_like(ctx.verts)
    u = np.asarray(upstream, dtype=np.float64).copy()
    for k in range(len(ctx.comps) - 1, -1, -1):
        c = ctx.comps[k]
        m = c.m_soft[..., None]
        d_color = u[..., :3] * m
        d_m = np.sum(u[..., :3] * (c.color - ctx.prefix_rgb[k]), axis=-1)
        d_m += u[..., 3] * (1.0 - ctx.prefix_a[k])
        _scatter_bary_color(grad, ctx.p, ctx.verts, ctx.pts, c, d_color)
        _scatter_edge_color(grad, ctx.p, ctx.verts, ctx.pts, c, d_color)
        _scatter_coverage(grad, ctx.verts, ctx.pts, c, d_m, ctx.sigma)
        u = u * (1.0 - m)  # transmit to earlier components (all 4 channels)
    return grad


# public soft API


def soft_render(s: DeformState, p: Puppet, cfg: RasterConfig) -> np.ndarray:
    """The smooth RGBA image the training losses see."""
    verts = _check_state(p, s)
    return _soft_forward(verts, p, cfg).rgba


def render_backward(
    s: DeformState, p: Puppet, cfg: RasterConfig, upstream: np.ndarray
) -> np.ndarray:
    """Gradient of sum(upstream * soft_render) w.r.t. the vertices."""
    verts = _check_state(p, s)
    ctx = _soft_forward(verts, p, cfg)
    return _soft_backward(ctx, np.asarray(upstream, dtype=np.float64))


def _union_coverage(ctx: _SoftCtx) -> np.ndarray:
    cov = np.zeros((ctx.cfg.height, ctx.cfg.width), dtype=np.float64)
    for c in ctx.comps:
        cov = c.m_soft + cov * (1.0 - c.m_soft)
    return cov


def coverage_area(s: DeformState, p: Puppet, cfg: RasterConfig) -> float:
    """Soft pixel area of the union coverage (background-independent)."""
    verts = _check_state(p, s)
    ctx = _soft_forward(verts, p, cfg)
    return float(np.sum(_union_coverage(ctx)))


# autodiff graph entry points


def render_st(verts: Tensor, p: Puppet, cfg: RasterConfig) -> Tensor:
    """Soft render as a graph op: (V,2) vertices -> (H,W,4) image."""
    ctx = _soft_forward(verts.data, p, cfg)
    out = Tensor(ctx.rgba, verts.requires_grad, (verts,), _op="render")

    def backprop(g):
        if verts.requires_grad:
            verts._accum(_soft_backward(ctx, g))

    out._backprop = backprop
    return out


def coverage_map_st(verts: Tensor, p: Puppet, cfg: RasterConfig) -> Tensor:
    """Soft union coverage as a graph op: (V,2) vertices -> (H,W) map."""
    ctx = _soft_forward(verts.data, p, cfg)
    out = Tensor(_union_coverage(ctx), verts.requires_grad, (verts,), _op="coverage_map")

    def backprop(g):
        if not verts.requires_grad:
            return
        grad = np.zeros_like(ctx.verts)
        n = len(ctx.comps)
        for k in range(n):
            d_m = np.asarray(g, dtype=np.float64).copy()
            for j in range(n):
                if j != k:
                    d_m *= 1.0 - ctx.comps[j].m_soft
            _scatter_coverage(grad, ctx.verts, ctx.pts, ctx.comps[k], d_m, ctx.sigma)
        verts._accum(grad)

    out._backprop = backprop
    return out


def coverage_area_st(verts: Tensor, p: Puppet, cfg: RasterConfig) -> Tensor:
    """Soft coverage area as a graph op: (V,2) vertices -> scalar."""
    ctx = _soft_forward(verts.data, p, cfg)
    area = float(np.sum(_union_coverage(ctx)))
    out = Tensor(area, verts.requires_grad, (verts,), _op="coverage_area")

    def backprop(g):
        if not verts.requires_grad:
            return
        grad = np.zeros_like(ctx.verts)
        n = len(ctx.comps)
        for k in range(n):
            d_m = np.full((ctx.cfg.height, ctx.cfg.width), float(g))
            for j in range(n):
                if j != k:
                    d_m *= 1.0 - ctx.comps[j].m_soft
            _scatter_coverage(grad, ctx.verts, ctx.pts, ctx.comps[k], d_m, ctx.sigma)
        verts._accum(grad)

    out._backprop = backprop
    return out
