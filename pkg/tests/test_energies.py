"""Scalar objective tests with independent oracles.

Rotations are cross-checked against an SVD polar decomposition, the
rigidity energy against a hand-expanded double sum, and the image losses
against naive per-pixel loops.
"""

import numpy as np
import pytest

from npuppet.autodiff import constant, grad_check, param
from npuppet.energies import (
    Constraint,
    LossWeights,
    arap_energy,
    arap_st,
    area_loss,
    area_st,
    combine_deform,
    combine_total,
    deform_objective,
    deform_st,
    joints_loss,
    joints_st,
    masked_rec_loss,
    masked_rec_st,
    optimal_rotations,
    rec_loss,
    rec_st,
    total_loss,
    total_st,
    user_loss,
    user_st,
)
from npuppet.errors import DegenerateMaskError, ShapeError, ValidationError
from npuppet.puppet import (
    Part,
    build_puppet,
    cotangent_weights,
    locate_point,
    make_deform_state,
    rest_state,
)
from npuppet.render import RasterConfig, coverage_area, render_mask, soft_render


# ---------------------------------------------------------------- oracles


def naive_rec(a, b):
    total = 0.0
    for r in range(a.shape[0]):
        for c in range(a.shape[1]):
            for ch in range(a.shape[2]):
                total += (a[r, c, ch] - b[r, c, ch]) ** 2
    return total


def naive_masked(x, rendered, mask):
    num = 0.0
    for r in range(x.shape[0]):
        for c in range(x.shape[1]):
            for ch in range(x.shape[2]):
                num += (x[r, c, ch] * mask[r, c] - rendered[r, c, ch]) ** 2
    return num / mask.sum()


def polar_rotation_oracle(S):
    """Rotation maximizing trace(R @ S) via SVD, det forced to +1."""
    U, _, Vt = np.linalg.svd(S)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    return Vt.T @ np.diag([1.0, d]) @ U.T


def naive_arap(rest, deformed, wmap, rots):
    """Hand double sum over directed neighbor pairs."""
    nbrs = {}
    for (i, j), w in wmap.items():
        nbrs.setdefault(i, []).append((j, w))
        nbrs.setdefault(j, []).append((i, w))
    total = 0.0
    for i, lst in nbrs.items():
        for j, w in lst:
            resid = (deformed[i] - deformed[j]) - rots[i] @ (rest[i] - rest[j])
            total += w * float(resid @ resid)
    return total


def rot2(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


# ---------------------------------------------------------------- fixtures


def equilateral_puppet():
    h = np.sqrt(3.0) / 2.0
    tri = np.array([[-0.5, -0.3], [0.5, -0.3], [0.0, -0.3 + h]])
    return build_puppet([Part("t", tri)])


def two_part_puppet(rng=None):
    """Quad torso plus an overlapping triangular limb (one joint)."""
    quad = np.array([[-0.5, -0.5], [0.4, -0.55], [0.45, 0.3], [-0.45, 0.35]])
    tri = np.array([[0.2, 0.1], [0.8, 0.2], [0.4, 0.7]])
    if rng is not None:
        quad = quad + rng.normal(0.0, 0.02, quad.shape)
        tri = tri + rng.normal(0.0, 0.02, tri.shape)
    return build_puppet([Part("torso", quad), Part("limb", tri)])


# ---------------------------------------------------------------- rec loss


def test_rec_loss_identical_zero():
    img = np.full((8, 8, 4), 0.3)
    assert rec_loss(img, img) == 0.0


def test_rec_loss_single_entry():
    a = np.zeros((4, 4, 4))
    b = a.copy()
    b[1, 2, 0] = 0.5
    assert rec_loss(a, b) == 0.25


def test_rec_loss_matches_naive_loop():
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 1, (6, 5, 4))
    b = rng.uniform(0, 1, (6, 5, 4))
    assert abs(rec_loss(a, b) - naive_rec(a, b)) < 1e-12


def test_rec_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        rec_loss(np.zeros((4, 4, 4)), np.zeros((4, 5, 4)))


# ---------------------------------------------------------------- rotations


def test_optimal_rotations_identity_at_rest():
    p = two_part_puppet()
    ew = cotangent_weights(p)
    R = optimal_rotations(p, ew, p.rest_vertices)
    assert np.allclose(R, np.eye(2)[None], atol=1e-12)


def test_optimal_rotations_global_rotation():
    p = two_part_puppet()
    ew = cotangent_weights(p)
    theta = np.pi / 6.0
    R30 = rot2(theta)
    R = optimal_rotations(p, ew, p.rest_vertices @ R30.T)
    assert np.allclose(R, R30[None], atol=1e-12)


def test_optimal_rotations_match_svd_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        p = two_part_puppet(rng)
        ew = cotangent_weights(p)
        dv = p.rest_vertices + rng.normal(0.0, 0.08, p.rest_vertices.shape)
        R = optimal_rotations(p, ew, dv)
        # rebuild each covariance independently and polar-decompose it
        wmap = ew.as_dict()
        for i in range(p.n_vertices):
            S = np.zeros((2, 2))
            for (a, b), w in wmap.items():
                if i == a or i == b:
                    j = b if i == a else a
                    r = p.rest_vertices[i] - p.rest_vertices[j]
                    d = dv[i] - dv[j]
                    S += w * np.outer(r, d)
            if np.linalg.norm(S) < 1e-12:
                continue
            assert np.allclose(R[i], polar_rotation_oracle(S), atol=1e-9), (seed, i)
        assert np.allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_optimal_rotations_collapsed_state_identity():
    p = two_part_puppet()
    ew = cotangent_weights(p)
    R = optimal_rotations(p, ew, np.zeros_like(p.rest_vertices))
    assert np.allclose(R, np.eye(2)[None])


# ---------------------------------------------------------------- rigidity


def test_arap_zero_on_rigid_motions():
    p = two_part_puppet()
    ew = cotangent_weights(p)
    rng = np.random.default_rng(7)
    for _ in range(100):
        theta = rng.uniform(0, 2 * np.pi)
        t = rng.uniform(-2, 2, 2)
        dv = p.rest_vertices @ rot2(theta).T + t
        assert arap_energy(p, ew, dv) <= 1e-10


def test_arap_equilateral_double_scale():
    p = equilateral_puppet()
    ew = cotangent_weights(p)
    e = arap_energy(p, ew, p.rest_vertices * 2.0)
    assert abs(e - np.sqrt(3.0)) < 1e-6
    # cross-check the full double sum with oracle rotations
    R = np.stack([polar_rotation_oracle(np.eye(2))] * 3)
    ref = naive_arap(p.rest_vertices, p.rest_vertices * 2.0, ew.as_dict(), R)
    assert abs(e - ref) < 1e-12


def test_arap_matches_naive_double_sum():
    rng = np.random.default_rng(11)
    p = two_part_puppet(rng)
    ew = cotangent_weights(p)
    dv = p.rest_vertices + rng.normal(0.0, 0.1, p.rest_vertices.shape)
    R = optimal_rotations(p, ew, dv)
    ref = naive_arap(p.rest_vertices, dv, ew.as_dict(), R)
    assert abs(arap_energy(p, ew, dv) - ref) < 1e-12


def test_arap_nonnegative_sweep():
    p = two_part_puppet()
    ew = cotangent_weights(p)
    rng = np.random.default_rng(13)
    for _ in range(1000):
        dv = p.rest_vertices + rng.normal(0.0, 0.3, p.rest_vertices.shape)
        assert arap_energy(p, ew, dv) >= 0.0


def test_arap_positive_on_nonrigid():
    p = two_part_puppet()
    ew = cotangent_weights(p)
    dv = p.rest_vertices.copy()
    dv[0] += (0.2, 0.0)
    assert arap_energy(p, ew, dv) > 1e-6


def test_arap_invariant_to_rigid_motion_of_deformed():
    rng = np.random.default_rng(17)
    p = two_part_puppet(rng)
    ew = cotangent_weights(p)
    dv = p.rest_vertices + rng.normal(0.0, 0.1, p.rest_vertices.shape)
    e0 = arap_energy(p, ew, dv)
    for _ in range(20):
        theta = rng.uniform(0, 2 * np.pi)
        t = rng.uniform(-1, 1, 2)
        e1 = arap_energy(p, ew, dv @ rot2(theta).T + t)
        assert abs(e1 - e0) <= 1e-10


# ---------------------------------------------------------------- joints


def test_joints_loss_examples():
    v = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert joints_loss(v, np.array([[0, 1]])) == 25.0
    v2 = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 2.0]])
    assert joints_loss(v2, np.array([[0, 1], [2, 3]])) == 5.0
    same = np.array([[0.2, 0.4], [0.2, 0.4]])
    assert joints_loss(same, np.array([[0, 1]])) == 0.0


def test_joints_loss_empty():
    assert joints_loss(np.zeros((4, 2)), np.zeros((0, 2), dtype=np.int64)) == 0.0


# ---------------------------------------------------------------- composition


def test_total_composition_exact():
    w = LossWeights()
    assert combine_total(2.0, 0.001, 0.0001, w) == 5.5
    assert combine_total(1.0, 0.0, 0.0, w) == 1.0
    zero = LossWeights(arap_weight=0.0, joints_weight=0.0)
    assert combine_total(0.7, 123.0, 456.0, zero) == 0.7


def test_deform_composition_exact():
    w = LossWeights()
    assert combine_deform(1.0, 0.1, 0.01, w) == 4.0


def test_total_loss_assembles_components():
    rng = np.random.default_rng(19)
    p = two_part_puppet(rng)
    ew = cotangent_weights(p)
    dv = p.rest_vertices + rng.normal(0.0, 0.05, p.rest_vertices.shape)
    s = make_deform_state(p, dv)
    cfg = RasterConfig(width=32, height=32)
    rendered = soft_render(s, p, cfg)
    target = soft_render(rest_state(p), p, cfg)
    w = LossWeights()
    got = total_loss(rendered, target, p, s, w, ew)
    want = (
        rec_loss(rendered, target)
        + w.arap_weight * arap_energy(p, ew, s)
        + w.joints_weight * joints_loss(s, p.joints)
    )
    assert abs(got - want) < 1e-12
    allzero = LossWeights(arap_weight=0.0, joints_weight=0.0)
    assert total_loss(rendered, target, p, s, allzero, ew) == rec_loss(rendered, target)


def test_weights_validation():
    with pytest.raises(ValidationError):
        LossWeights(arap_weight=-1.0)
    with pytest.raises(ValidationError):
        LossWeights(area_weight=-0.5)


# ---------------------------------------------------------------- user loss


def test_user_loss_satisfied_zero():
    p = two_part_puppet()
    s = rest_state(p)
    q = p.rest_vertices.mean(axis=0)
    cp = locate_point(p, s, q)
    c = Constraint(point=cp, target=q)
    assert user_loss(p, s, [c]) < 1e-24


def test_user_loss_offset_point():
    p = two_part_puppet()
    s = rest_state(p)
    q = p.rest_vertices.mean(axis=0)
    cp = locate_point(p, s, q)
    c = Constraint(point=cp, target=q + np.array([0.3, 0.4]))
    assert abs(user_loss(p, s, [c]) - 0.25) < 1e-12


def test_user_loss_empty():
    p = two_part_puppet()
    assert user_loss(p, rest_state(p), []) == 0.0


def test_constraint_validation():
    p = two_part_puppet()
    cp = locate_point(p, rest_state(p), p.rest_vertices.mean(axis=0))
    with pytest.raises(ValidationError):
        Constraint(point=cp, target=np.array([np.nan, 0.0]))


def test_deform_objective_zero_at_rest_with_satisfied():
    # single part: no joints, so every term vanishes at rest
    p = equilateral_puppet()
    s = rest_state(p)
    q = p.rest_vertices.mean(axis=0)
    c = Constraint(point=locate_point(p, s, q), target=q)
    assert deform_objective(p, s, [c]) < 1e-20


def test_deform_objective_no_constraints():
    rng = np.random.default_rng(23)
    p = two_part_puppet(rng)
    ew = cotangent_weights(p)
    dv = p.rest_vertices + rng.normal(0.0, 0.05, p.rest_vertices.shape)
    s = make_deform_state(p, dv)
    w = LossWeights()
    want = w.user_arap_weight * arap_energy(p, ew, s) + w.user_joints_weight * joints_loss(
        s, p.joints
    )
    assert abs(deform_objective(p, s, [], w, ew) - want) < 1e-12


# ---------------------------------------------------------------- masked rec


def test_masked_rec_zero_when_matching_on_mask():
    rng = np.random.default_rng(29)
    p = two_part_puppet(rng)
    cfg = RasterConfig(width=32, height=32, background=(0.0, 0.0, 0.0, 0.0))
    s = rest_state(p)
    rendered = soft_render(s, p, cfg)
    mask = render_mask(s, p, cfg).astype(np.float64)
    # input agrees with the render under the mask, noise elsewhere
    x = rng.uniform(0, 1, rendered.shape)
    x[mask > 0] = rendered[mask > 0]
    # hard-masked pixels of a soft render retain faint edge mismatch
    assert masked_rec_loss(x, rendered * mask[..., None], mask) < 1e-20


def test_masked_rec_ignores_background():
    rng = np.random.default_rng(31)
    p = two_part_puppet(rng)
    cfg = RasterConfig(width=32, height=32, background=(0.0, 0.0, 0.0, 0.0))
    s = rest_state(p)
    rendered = soft_render(s, p, cfg)
    mask = render_mask(s, p, cfg).astype(np.float64)
    x1 = rng.uniform(0, 1, rendered.shape)
    x2 = x1.copy()
    x2[mask == 0] = rng.uniform(0, 1, (int((mask == 0).sum()), 4))
    assert masked_rec_loss(x1, rendered, mask) == masked_rec_loss(x2, rendered, mask)


def test_masked_rec_matches_naive():
    rng = np.random.default_rng(37)
    x = rng.uniform(0, 1, (7, 6, 4))
    r = rng.uniform(0, 1, (7, 6, 4))
    m = (rng.uniform(0, 1, (7, 6)) > 0.5).astype(np.float64)
    assert abs(masked_rec_loss(x, r, m) - naive_masked(x, r, m)) < 1e-12


def test_masked_rec_degenerate_mask():
    x = np.zeros((4, 4, 4))
    with pytest.raises(DegenerateMaskError):
        masked_rec_loss(x, x, np.zeros((4, 4)))


def test_masked_rec_shape_mismatch():
    with pytest.raises(ShapeError):
        masked_rec_loss(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), np.zeros((5, 4)))


# ---------------------------------------------------------------- area loss


def test_area_loss_zero_at_rest():
    p = two_part_puppet()
    cfg = RasterConfig(width=64, height=64)
    assert area_loss(rest_state(p), rest_state(p), p, cfg) == 0.0


def test_area_loss_scale_oracle():
    # quadrupling the area should cost about (3 * rest_area)^2
    tri = np.array([[-0.2, -0.2], [0.2, -0.15], [-0.05, 0.2]])
    p = build_puppet([Part("t", tri)])
    cfg = RasterConfig(width=64, height=64)
    s_rest = rest_state(p)
    s_big = make_deform_state(p, p.rest_vertices * 2.0)
    hard_rest = float(render_mask(s_rest, p, cfg).sum())
    got = area_loss(s_big, s_rest, p, cfg)
    want = (3.0 * hard_rest) ** 2
    assert abs(got - want) <= 0.1 * want


def test_area_loss_equals_squared_difference():
    rng = np.random.default_rng(41)
    p = two_part_puppet(rng)
    cfg = RasterConfig(width=32, height=32)
    s = make_deform_state(p, p.rest_vertices * 1.1)
    d = coverage_area(s, p, cfg) - coverage_area(rest_state(p), p, cfg)
    assert abs(area_loss(s, rest_state(p), p, cfg) - d * d) < 1e-9


# ---------------------------------------------------------------- gradients


def test_mesh_term_gradients_match_fd():
    rng = np.random.default_rng(43)
    p = two_part_puppet(rng)
    ew = cotangent_weights(p)
    s = rest_state(p)
    q = p.rest_vertices.mean(axis=0)
    cons = [Constraint(point=locate_point(p, s, q), target=q + np.array([0.05, -0.04]))]
    dv = p.rest_vertices + rng.normal(0.0, 0.05, p.rest_vertices.shape)

    for fn in (
        lambda t: arap_st(t["v"], p, ew),
        lambda t: joints_st(t["v"], p.joints),
        lambda t: user_st(t["v"], p, cons),
        lambda t: deform_st(t["v"], p, ew, cons, LossWeights()),
    ):
        report = grad_check(fn, {"v": dv.copy()}, h=1e-5, rng=rng)
        assert report.max_rel_err <= 1e-5


def test_raster_term_gradients_match_fd():
    rng = np.random.default_rng(47)
    p = two_part_puppet(rng)
    ew = cotangent_weights(p)
    cfg = RasterConfig(width=32, height=32)
    target = soft_render(
        make_deform_state(p, p.rest_vertices + rng.normal(0, 0.02, p.rest_vertices.shape)),
        p,
        cfg,
    )
    dv = p.rest_vertices + rng.normal(0.0, 0.03, p.rest_vertices.shape)
    rest_area = coverage_area(rest_state(p), p, cfg)

    checks = [
        lambda t: rec_st(t["v"], p, cfg, target),
        lambda t: total_st(t["v"], p, ew, cfg, target, LossWeights()),
        lambda t: area_st(t["v"], p, cfg, rest_area),
    ]
    for fn in checks:
        report = grad_check(fn, {"v": dv.copy()}, h=1e-3, rng=rng)
        assert report.max_rel_err <= 2e-2


def test_masked_rec_gradient_matches_fd():
    rng = np.random.default_rng(53)
    p = two_part_puppet(rng)
    cfg = RasterConfig(width=32, height=32, background=(0.0, 0.0, 0.0, 0.0))
    target = soft_render(
        make_deform_state(p, p.rest_vertices + rng.normal(0, 0.02, p.rest_vertices.shape)),
        p,
        cfg,
    )
    dv = p.rest_vertices + rng.normal(0.0, 0.03, p.rest_vertices.shape)
    report = grad_check(
        lambda t: masked_rec_st(t["v"], p, cfg, target), {"v": dv.copy()}, h=1e-3, rng=rng
    )
    assert report.max_rel_err <= 2e-2


def test_total_st_value_matches_plain():
    rng = np.random.default_rng(59)
    p = two_part_puppet(rng)
    ew = cotangent_weights(p)
    cfg = RasterConfig(width=32, height=32)
    target = soft_render(rest_state(p), p, cfg)
    dv = p.rest_vertices + rng.normal(0.0, 0.05, p.rest_vertices.shape)
    s = make_deform_state(p, dv)
    w = LossWeights()
    t = total_st(constant(dv), p, ew, cfg, target, w)
    plain = total_loss(soft_render(s, p, cfg), target, p, s, w, ew)
    assert abs(float(t.data) - plain) < 1e-9
