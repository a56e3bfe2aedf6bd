"""Scalar objectives for fitting and posing puppets.

Covers the image reconstruction loss, the local-rigidity regularizer with
per-vertex optimal rotations, joint cohesion, the user drag constraint
objective, masked reconstruction for cluttered backgrounds, and the
silhouette area penalty. Every term has a plain float evaluation and a
graph (``_st``) form whose gradients flow to the deformed vertices.

The rigidity term follows the local/global split: rotations are fit in
closed form to the current deformed state on every evaluation and held
constant during differentiation. Because each rotation minimizes its own
cell's residual, the envelope argument keeps the vertex gradient exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import (
    Tensor,
    add,
    constant,
    div,
    expand_last,
    matmul,
    mul,
    sqnorm,
    sub,
    take,
    tsum,
)
from .errors import DegenerateMaskError, ShapeError, ValidationError
from .puppet import (
    ControlPoint,
    DeformState,
    EdgeWeights,
    Puppet,
    cotangent_weights,
    eval_control_point,
    make_deform_state,
    rest_state,
)
from .render import (
    RasterConfig,
    coverage_area,
    coverage_area_st,
    coverage_map_st,
    render_st,
)


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights for the composite objectives."""

    arap_weight: float = 2500.0
    joints_weight: float = 1.0e4
    user_arap_weight: float = 25.0
    user_joints_weight: float = 50.0
    area_weight: float = 2.0e-3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValidationError(f"loss weight {f.name} must be >= 0")


@dataclass(frozen=True)
class Constraint:
    """A drag handle: a point on the mesh and where it should end up."""

    point: ControlPoint
    target: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        t = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if t.shape != (2,) or not np.all(np.isfinite(t)):
            raise ValidationError("constraint target must be a finite 2D point")
        object.__setattr__(self, "target", t)


def _verts(state) -> np.ndarray:
    v = state.vertices if isinstance(state, DeformState) else np.asarray(state, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 2:
        raise ShapeError(f"vertex array must be (V,2), got {v.shape}")
    return v


# ---------------------------------------------------------------- image terms


def rec_loss(rendered, target) -> float:
    """Sum of squared per-pixel differences."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"rec_loss: image shapes {a.shape} and {b.shape} do not match")
    d = a - b
    return float(np.sum(d * d))


def masked_rec_loss(target, rendered, mask) -> float:
    """Squared difference between the mask-gated input and the rendered
    character, normalized by the covered pixel count."""
    x = np.asarray(target, dtype=np.float64)
    r = np.asarray(rendered, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if x.shape != r.shape:
        raise ShapeError(f"masked_rec_loss: image shapes {x.shape} and {r.shape} do not match")
    if m.shape != x.shape[:2]:
        raise ShapeError(
            f"masked_rec_loss: mask shape {m.shape} does not match image plane {x.shape[:2]}"
        )
    denom = float(m.sum())
    if denom <= 0.0:
        raise DegenerateMaskError("mask covers no pixels; the character has collapsed")
    d = x * m[..., None] - r
    return float(np.sum(d * d) / denom)


# ---------------------------------------------------------------- rigidity


def optimal_rotations(p: Puppet, ew: EdgeWeights, deformed) -> np.ndarray:
    """Per-vertex rotation best aligning each rest edge fan with its
    deformed counterpart (closed-form 2x2 polar decomposition).

    The covariance S_i = sum_j w_ij (rest_i - rest_j)(def_i - def_j)^T is
    symmetric under edge direction flips, so each undirected edge feeds the
    same outer product to both endpoint accumulators. A zero covariance
    falls back to the identity."""
    dv = _verts(deformed)
    rv = p.rest_vertices
    e0, e1 = ew.edges[:, 0], ew.edges[:, 1]
    r = rv[e0] - rv[e1]
    d = dv[e0] - dv[e1]
    outer = ew.weights[:, None, None] * (r[:, :, None] * d[:, None, :])
    S = np.zeros((p.n_vertices, 2, 2))
    np.add.at(S, e0, outer)
    np.add.at(S, e1, outer)
    # trace and skew of S determine the rotation maximizing tr(R S)
    tr = S[:, 0, 0] + S[:, 1, 1]
    sk = S[:, 0, 1] - S[:, 1, 0]
    n = np.hypot(tr, sk)
    ok = n > 0.0
    safe = np.where(ok, n, 1.0)
    c = np.where(ok, tr / safe, 1.0)
    s = np.where(ok, sk / safe, 0.0)
    R = np.empty((p.n_vertices, 2, 2))
    R[:, 0, 0] = c
    R[:, 0, 1] = -s
    R[:, 1, 0] = s
    R[:, 1, 1] = c
    return R


def _rotated_rest_edges(p: Puppet, ew: EdgeWeights, R: np.ndarray):
    r = p.rest_vertices[ew.edges[:, 0]] - p.rest_vertices[ew.edges[:, 1]]
    rot_i = np.einsum("eab,eb->ea", R[ew.edges[:, 0]], r)
    rot_j = np.einsum("eab,eb->ea", R[ew.edges[:, 1]], r)
    return rot_i, rot_j


def arap_energy(p: Puppet, ew: EdgeWeights, deformed) -> float:
    """Weighted squared deviation of every directed edge from the rotated
    rest edge; each undirected edge is counted once per endpoint rotation."""
    dv = _verts(deformed)
    R = optimal_rotations(p, ew, dv)
    rot_i, rot_j = _rotated_rest_edges(p, ew, R)
    d = dv[ew.edges[:, 0]] - dv[ew.edges[:, 1]]
    w = ew.weights[:, None]
    return float(np.sum(w * ((d - rot_i) ** 2 + (d - rot_j) ** 2)))


def arap_st(v: Tensor, p: Puppet, ew: EdgeWeights) -> Tensor:
    """Graph form of the rigidity energy; rotations are constants fit to
    the current vertex values."""
    R = optimal_rotations(p, ew, v.data)
    rot_i, rot_j = _rotated_rest_edges(p, ew, R)
    d = sub(take(v, ew.edges[:, 0]), take(v, ew.edges[:, 1]))
    w2 = constant(np.repeat(ew.weights[:, None], 2, axis=1))
    di = sub(d, constant(rot_i))
    dj = sub(d, constant(rot_j))
    return add(tsum(mul(mul(di, di), w2)), tsum(mul(mul(dj, dj), w2)))


# ---------------------------------------------------------------- joints


def joints_loss(deformed, joints) -> float:
    """Sum of squared gaps between the two endpoints of every joint."""
    dv = _verts(deformed)
    j = np.asarray(joints, dtype=np.int64).reshape(-1, 2)
    if j.shape[0] == 0:
        return 0.0
    d = dv[j[:, 0]] - dv[j[:, 1]]
    return float(np.sum(d * d))


def joints_st(v: Tensor, joints) -> Tensor:
    j = np.asarray(joints, dtype=np.int64).reshape(-1, 2)
    if j.shape[0] == 0:
        return constant(0.0)
    return sqnorm(sub(take(v, j[:, 0]), take(v, j[:, 1])))


# ---------------------------------------------------------------- user drags


def user_loss(p: Puppet, deformed, constraints) -> float:
    """Squared distance of each dragged point to its target."""
    s = deformed if isinstance(deformed, DeformState) else make_deform_state(p, deformed)
    total = 0.0
    for c in constraints:
        d = eval_control_point(p, s, c.point) - c.target
        total += float(d @ d)
    return total


def user_st(v: Tensor, p: Puppet, constraints) -> Tensor:
    total = constant(0.0)
    for c in constraints:
        fv = take(v, p.faces[c.point.face_index])
        bary = np.asarray(c.point.bary, dtype=np.float64).reshape(1, 3)
        pos = matmul(constant(bary), fv)
        total = add(total, sqnorm(sub(pos, constant(c.target.reshape(1, 2)))))
    return total


# ---------------------------------------------------------------- area


def area_loss(deformed: DeformState, rest: DeformState, p: Puppet, cfg: RasterConfig) -> float:
    """Squared change of the soft silhouette pixel area."""
    d = coverage_area(deformed, p, cfg) - coverage_area(rest, p, cfg)
    return float(d * d)


def area_st(v: Tensor, p: Puppet, cfg: RasterConfig, rest_area: float) -> Tensor:
    d = sub(coverage_area_st(v, p, cfg), constant(float(rest_area)))
    return mul(d, d)


# ---------------------------------------------------------------- composites


def combine_total(rec: float, arap: float, joints: float, lw: LossWeights) -> float:
    return float(rec + lw.arap_weight * arap + lw.joints_weight * joints)


def combine_deform(user: float, arap: float, joints: float, lw: LossWeights) -> float:
    return float(user + lw.user_arap_weight * arap + lw.user_joints_weight * joints)


def total_loss(
    rendered,
    target,
    p: Puppet,
    deformed,
    lw: LossWeights = LossWeights(),
    ew: EdgeWeights | None = None,
) -> float:
    """Fitting objective: reconstruction plus weighted rigidity and joints."""
    if ew is None:
        ew = cotangent_weights(p)
    return combine_total(
        rec_loss(rendered, target),
        arap_energy(p, ew, deformed),
        joints_loss(deformed, p.joints),
        lw,
    )


def deform_objective(
    p: Puppet,
    deformed,
    constraints,
    lw: LossWeights = LossWeights(),
    ew: EdgeWeights | None = None,
) -> float:
    """Posing objective: drag targets plus weighted rigidity and joints."""
    if ew is None:
        ew = cotangent_weights(p)
    return combine_deform(
        user_loss(p, deformed, constraints),
        arap_energy(p, ew, deformed),
        joints_loss(deformed, p.joints),
        lw,
    )


def rec_st(v: Tensor, p: Puppet, cfg: RasterConfig, target) -> Tensor:
    img = render_st(v, p, cfg)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != img.data.shape:
        raise ShapeError(f"rec_st: target shape {t.shape} does not match render {img.data.shape}")
    return sqnorm(sub(img, constant(t)))


def total_st(
    v: Tensor,
    p: Puppet,
    ew: EdgeWeights,
    cfg: RasterConfig,
    target,
    lw: LossWeights = LossWeights(),
) -> Tensor:
    t = rec_st(v, p, cfg, target)
    t = add(t, mul(lw.arap_weight, arap_st(v, p, ew)))
    return add(t, mul(lw.joints_weight, joints_st(v, p.joints)))


def deform_st(
    v: Tensor,
    p: Puppet,
    ew: EdgeWeights,
    constraints,
    lw: LossWeights = LossWeights(),
) -> Tensor:
    t = user_st(v, p, constraints)
    t = add(t, mul(lw.user_arap_weight, arap_st(v, p, ew)))
    return add(t, mul(lw.user_joints_weight, joints_st(v, p.joints)))


def masked_rec_st(v: Tensor, p: Puppet, cfg: RasterConfig, target) -> Tensor:
    """Graph form of the masked reconstruction: the character is rendered
    over a transparent black background and gated by its own soft coverage
    so background pixels of the input cannot pull gradients."""
    black = RasterConfig(
        width=cfg.width, height=cfg.height, sigma=cfg.sigma, background=(0.0, 0.0, 0.0, 0.0)
    )
    img = render_st(v, p, black)
    x = np.asarray(target, dtype=np.float64)
    if x.shape != img.data.shape:
        raise ShapeError(
            f"masked_rec_st: target shape {x.shape} does not match render {img.data.shape}"
        )
    m = coverage_map_st(v, p, black)
    denom = tsum(m)
    if float(denom.data) <= 0.0:
        raise DegenerateMaskError("soft coverage is empty; the character has collapsed")
    gated = mul(expand_last(m, x.shape[-1]), constant(x))
    return div(sqnorm(sub(gated, img)), denom)


def wild_total_st(
    v: Tensor,
    p: Puppet,
    ew: EdgeWeights,
    cfg: RasterConfig,
    target,
    lw: LossWeights = LossWeights(),
    rest_area: float | None = None,
) -> Tensor:
    """Fitting objective for frames that carry a background: masked
    reconstruction plus rigidity, joints, and the area anchor that stops
    the silhouette from dilating into background clutter."""
    if rest_area is None:
        rest_area = coverage_area(rest_state(p), p, cfg)
    t = masked_rec_st(v, p, cfg, target)
    t = add(t, mul(lw.arap_weight, arap_st(v, p, ew)))
    t = add(t, mul(lw.joints_weight, joints_st(v, p.joints)))
    return add(t, mul(lw.area_weight, area_st(v, p, cfg, rest_area)))
