"""Layered deformable puppet: construction, validation, and mesh queries.

A puppet is one triangle mesh whose faces are partitioned into layers, drawn
back to front. Each layer is a separate connected component. Hinge joints are
vertex pairs spanning two layers. Texture lives in a single RGBA atlas built
from translated copies of the per-part textures; each part's texture is
assumed to depict the part over its outline's bounding box.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import (
    barycentric,
    closest_point_on_triangle,
    point_triangle_distance,
    points_in_polygon,
)
from .images import load_rgba, save_rgba
from .triangulate import ear_clip, refine_to_edge_length, midpoint_subdivide

_PALETTE = np.array(
    [
        [0.86, 0.37, 0.34],
        [0.37, 0.62, 0.86],
        [0.47, 0.78, 0.46],
        [0.91, 0.73, 0.32],
        [0.68, 0.51, 0.84],
        [0.40, 0.77, 0.75],
    ]
)


@dataclass(frozen=True)
class Layer:
    """Half-open face range [face_start, face_end) plus a display name."""

    name: str
    face_start: int
    face_end: int


@dataclass(frozen=True)
class Puppet:
    rest_vertices: np.ndarray  # (V,2) float64, NDC
    faces: np.ndarray  # (F,3) int64
    layers: tuple[Layer, ...]  # back to front
    joints: np.ndarray  # (J,2) int64 vertex pairs
    uv: np.ndarray  # (V,2) float64 in [0,1]
    texture: np.ndarray  # (Ht,Wt,4) float64 in [0,1]

    @property
    def n_vertices(self) -> int:
        return int(self.rest_vertices.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])


@dataclass(frozen=True)
class DeformState:
    """One pose: per-vertex positions in the puppet's vertex order."""

    vertices: np.ndarray  # (V,2) float64


@dataclass(frozen=True)
class ControlPoint:
    face_index: int
    bary: np.ndarray  # (3,) float64, non-negative, sums to 1


@dataclass
class Part:
    """Input to build_puppet: a named outline, back-to-front order, with an
    optional RGBA texture spanning the outline's bounding box."""

    name: str
    outline: np.ndarray
    texture: np.ndarray | None = None


@dataclass
class AtlasLayout:
    """Grid placement for per-part textures inside the atlas."""

    cols: int | None = None


class LocateMiss(ValidationError):
    """Raised when a query point is outside every face. Carries the nearest
    face so callers can fall back to the closest on-mesh point."""

    def __init__(self, point, distance: float, nearest: ControlPoint, nearest_point):
        super().__init__(
            f"point ({point[0]:.6g}, {point[1]:.6g}) lies outside the mesh; "
            f"nearest face {nearest.face_index} at distance {distance:.6g}"
        )
        self.point = np.asarray(point, dtype=np.float64)
        self.distance = float(distance)
        self.nearest = nearest
        self.nearest_point = np.asarray(nearest_point, dtype=np.float64)


def face_layer_ids(p: Puppet) -> np.ndarray:
    """Layer index of every face, (F,) int64."""
    out = np.full(p.n_faces, -1, dtype=np.int64)
    for li, layer in enumerate(p.layers):
        out[layer.face_start : layer.face_end] = li
    return out


def vertex_layer_ids(p: Puppet) -> np.ndarray:
    """Layer index of every vertex (vertices referenced by no face get -1)."""
    fl = face_layer_ids(p)
    out = np.full(p.n_vertices, -1, dtype=np.int64)
    for f, li in zip(p.faces, fl):
        out[f] = li
    return out


def _vertex_components(p: Puppet) -> np.ndarray:
    """Connected-component label per vertex under face adjacency."""
    parent = np.arange(p.n_vertices)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b, c in p.faces:
        ra, rb, rc = find(int(a)), find(int(b)), find(int(c))
        parent[rb] = ra
        parent[rc] = ra
    return np.array([find(i) for i in range(p.n_vertices)])


def validate_puppet(p: Puppet) -> None:
    """Check the structural invariants; raises ValidationError on the first
    violation."""
    v, f = p.rest_vertices, p.faces
    if v.ndim != 2 or v.shape[1] != 2:
        raise ValidationError(f"rest_vertices must be (V,2), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("rest_vertices contain non-finite values")
    if f.ndim != 2 or f.shape[1] != 3:
        raise ValidationError(f"faces must be (F,3), got {f.shape}")
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise ValidationError(
            f"face vertex index out of range: max {f.max()} for {len(v)} vertices"
        )
    covered = np.zeros(len(f), dtype=np.int64)
    for layer in p.layers:
        if not (0 <= layer.face_start <= layer.face_end <= len(f)):
            raise ValidationError(
                f"layer '{layer.name}' range [{layer.face_start},{layer.face_end}) "
                f"out of bounds for {len(f)} faces"
            )
        covered[layer.face_start : layer.face_end] += 1
    if np.any(covered > 1):
        k = int(np.argmax(covered > 1))
        raise ValidationError(f"face {k} belongs to more than one layer")
    if np.any(covered == 0):
        k = int(np.argmax(covered == 0))
        raise ValidationError(f"face {k} belongs to no layer")
    if p.uv.shape != v.shape:
        raise ValidationError(f"uv must match vertices shape {v.shape}, got {p.uv.shape}")
    if np.any(p.uv < -1e-9) or np.any(p.uv > 1.0 + 1e-9):
        raise ValidationError("uv coordinates outside [0,1]")
    if p.texture.ndim != 3 or p.texture.shape[2] != 4:
        raise ValidationError(f"texture must be (H,W,4), got {p.texture.shape}")
    vl = vertex_layer_ids(p)
    if p.joints.size:
        if p.joints.ndim != 2 or p.joints.shape[1] != 2:
            raise ValidationError(f"joints must be (J,2), got {p.joints.shape}")
        if p.joints.min() < 0 or p.joints.max() >= len(v):
            raise ValidationError("joint vertex index out of range")
        for j, (a, b) in enumerate(p.joints):
            if vl[a] == vl[b]:
                raise ValidationError(
                    f"joint {j} = ({a},{b}) does not span two layers"
                )
    comp = _vertex_components(p)
    fl = face_layer_ids(p)
    comp_layer: dict[int, int] = {}
    for k in range(len(f)):
        root = int(comp[f[k, 0]])
        li = int(fl[k])
        if comp_layer.setdefault(root, li) != li:
            raise ValidationError(
                f"connected component containing face {k} spans multiple layers"
            )


# ---------------------------------------------------------------------------
# construction


def _placeholder_texture(index: int, size: int = 16) -> np.ndarray:
    rgb = _PALETTE[index % len(_PALETTE)]
    tex = np.empty((size, size, 4), dtype=np.float64)
    tex[..., :3] = rgb
    tex[..., 3] = 1.0
    return tex


@dataclass
class _PartMesh:
    name: str
    outline: np.ndarray
    vertices: np.ndarray  # (v,2) local
    faces: np.ndarray  # (f,3) local indices
    texture: np.ndarray
    vertex_offset: int = 0


def _triangulate_parts(parts, max_edge):
    meshes = []
    for i, part in enumerate(parts):
        verts, faces = ear_clip(part.outline, name=f"part '{part.name}'")
        if max_edge is not None:
            verts, faces = refine_to_edge_length(verts, faces, max_edge)
        tex = part.texture if part.texture is not None else _placeholder_texture(i)
        tex = np.asarray(tex, dtype=np.float64)
        if tex.ndim != 3 or tex.shape[2] != 4:
            raise ValidationError(
                f"part '{part.name}': texture must be (H,W,4), got {tex.shape}"
            )
        meshes.append(_PartMesh(part.name, np.asarray(part.outline, float), verts, faces, tex))
    return meshes


def compute_joints(meshes: list[_PartMesh], raster: int = 512) -> list[tuple[int, int]]:
    """One hinge joint per consecutive part pair with overlapping outlines.

    The overlap region is the AND of the two outlines rasterized over their
    union bounding box; the joint snaps the region centroid to the nearest
    mesh vertex in each part. Pairs with no overlap are skipped with a
    warning. Returned indices are global (offset by each part's position in
    the combined vertex array)."""
    joints: list[tuple[int, int]] = []
    for i in range(len(meshes) - 1):
        a, b = meshes[i], meshes[i + 1]
        lo = np.minimum(a.outline.min(axis=0), b.outline.min(axis=0))
        hi = np.maximum(a.outline.max(axis=0), b.outline.max(axis=0))
        span = np.maximum(hi - lo, 1e-12)
        xs = lo[0] + (np.arange(raster) + 0.5) / raster * span[0]
        ys = lo[1] + (np.arange(raster) + 0.5) / raster * span[1]
        gx, gy = np.meshgrid(xs, ys)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        inside = points_in_polygon(a.outline, pts) & points_in_polygon(b.outline, pts)
        if not inside.any():
            warnings.warn(
                f"parts '{a.name}' and '{b.name}' do not overlap; no joint placed",
                stacklevel=2,
            )
            continue
        centroid = pts[inside].mean(axis=0)
        pa = int(np.argmin(np.linalg.norm(a.vertices - centroid, axis=1)))
        pb = int(np.argmin(np.linalg.norm(b.vertices - centroid, axis=1)))
        joints.append((a.vertex_offset + pa, b.vertex_offset + pb))
    return joints


def _compose_atlas(meshes: list[_PartMesh], layout: AtlasLayout):
    """Place each part texture in a grid cell (translation only) and derive
    per-vertex UVs from the affine map outline-bbox -> texture pixel box."""
    n = len(meshes)
    cols = layout.cols if layout.cols is not None else max(1, math.ceil(math.sqrt(n)))
    if cols < 1:
        raise ValidationError(f"atlas cols must be >= 1, got {cols}")
    rows = math.ceil(n / cols)
    cell_h = max(m.texture.shape[0] for m in meshes)
    cell_w = max(m.texture.shape[1] for m in meshes)
    atlas = np.zeros((rows * cell_h, cols * cell_w, 4), dtype=np.float64)
    uvs = []
    ah, aw = atlas.shape[0], atlas.shape[1]
    for i, m in enumerate(meshes):
        r, c = divmod(i, cols)
        y0, x0 = r * cell_h, c * cell_w
        th, tw = m.texture.shape[0], m.texture.shape[1]
        atlas[y0 : y0 + th, x0 : x0 + tw] = m.texture
        lo = m.outline.min(axis=0)
        hi = m.outline.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        fx = (m.vertices[:, 0] - lo[0]) / span[0]
        fy = (hi[1] - m.vertices[:, 1]) / span[1]  # v runs top-down
        u_px = x0 + fx * (tw - 1)
        v_px = y0 + fy * (th - 1)
        u = u_px / (aw - 1) if aw > 1 else np.zeros_like(u_px)
        v = v_px / (ah - 1) if ah > 1 else np.zeros_like(v_px)
        uvs.append(np.stack([u, v], axis=-1))
    return atlas, uvs


def build_puppet(
    parts: list[Part],
    atlas_layout: AtlasLayout | None = None,
    max_edge: float | None = None,
    joints: list[tuple[int, int]] | None = None,
    joint_raster: int = 512,
) -> Puppet:
    """Triangulate the parts (ordered back to front), compose the texture
    atlas, and place hinge joints.

    max_edge, when given, refines each part mesh by midpoint subdivision
    until no edge exceeds it. joints, when given, bypasses the automatic
    overlap-centroid placement (global vertex index pairs)."""
    if not parts:
        raise ValidationError("build_puppet needs at least one part")
    layout = atlas_layout if atlas_layout is not None else AtlasLayout()
    meshes = _triangulate_parts(parts, max_edge)

    offset = 0
    face_offset = 0
    layers = []
    for m in meshes:
        m.vertex_offset = offset
        layers.append(Layer(m.name, face_offset, face_offset + len(m.faces)))
        offset += len(m.vertices)
        face_offset += len(m.faces)

    vertices = np.concatenate([m.vertices for m in meshes], axis=0)
    faces = np.concatenate(
        [m.faces + m.vertex_offset for m in meshes], axis=0
    ).astype(np.int64)

    if joints is None:
        joint_list = compute_joints(meshes, raster=joint_raster)
    else:
        joint_list = [(int(a), int(b)) for a, b in joints]
    joints_arr = (
        np.asarray(joint_list, dtype=np.int64)
        if joint_list
        else np.zeros((0, 2), dtype=np.int64)
    )

    atlas, uvs = _compose_atlas(meshes, layout)
    uv = np.concatenate(uvs, axis=0)

    p = Puppet(
        rest_vertices=vertices,
        faces=faces,
        layers=tuple(layers),
        joints=joints_arr,
        uv=uv,
        texture=atlas,
    )
    validate_puppet(p)
    return p


def subdivide_midpoint(p: Puppet) -> Puppet:
    """One global round of 1-to-4 midpoint subdivision.

    Old vertices keep their indices, so joints carry over unchanged; UVs of
    the new midpoints are edge midpoints in UV space; every layer's face
    range scales by 4."""
    v2, f2 = midpoint_subdivide(p.rest_vertices, p.faces)
    # rebuild uv with the same midpoint bookkeeping the subdivision used
    uv2 = np.zeros((len(v2), 2), dtype=np.float64)
    uv2[: p.n_vertices] = p.uv
    seen: dict[tuple[int, int], None] = {}
    next_id = p.n_vertices
    for a, b, c in p.faces:
        for i, j in ((a, b), (b, c), (c, a)):
            key = (min(int(i), int(j)), max(int(i), int(j)))
            if key not in seen:
                seen[key] = None
                uv2[next_id] = 0.5 * (p.uv[key[0]] + p.uv[key[1]])
                next_id += 1
    layers = tuple(
        Layer(l.name, 4 * l.face_start, 4 * l.face_end) for l in p.layers
    )
    out = Puppet(
        rest_vertices=v2,
        faces=f2,
        layers=layers,
        joints=p.joints.copy(),
        uv=uv2,
        texture=p.texture,
    )
    validate_puppet(out)
    return out


# ---------------------------------------------------------------------------
# queries


def rest_state(p: Puppet) -> DeformState:
    return DeformState(vertices=p.rest_vertices.copy())


def make_deform_state(p: Puppet, vertices: np.ndarray) -> DeformState:
    v = np.asarray(vertices, dtype=np.float64)
    if v.shape != (p.n_vertices, 2):
        raise ValidationError(
            f"deform state needs shape ({p.n_vertices},2), got {v.shape}"
        )
    if not np.all(np.isfinite(v)):
        raise ValidationError("deform state contains non-finite coordinates")
    return DeformState(vertices=v)


def _clamped_bary(b: np.ndarray) -> np.ndarray:
    b = np.clip(b, 0.0, None)
    s = b.sum()
    return b / s if s > 0 else np.array([1.0, 0.0, 0.0])


def locate_point(p: Puppet, s: DeformState, q, eps: float = 1e-9) -> ControlPoint:
    """Find the topmost face containing q in the deformed mesh.

    Among covering faces the one with the largest layer index wins; within a
    layer the larger face index wins, which makes the choice deterministic
    for points on shared edges. Raises LocateMiss (with the nearest face and
    its clamped barycentric coordinates) when q is outside every face."""
    q = np.asarray(q, dtype=np.float64)
    fl = face_layer_ids(p)
    tris = s.vertices[p.faces]  # (F,3,2)
    best: tuple[int, int] | None = None
    best_bary = None
    for k in range(p.n_faces):
        b = barycentric(tris[k], q)
        if np.all(np.isfinite(b)) and np.all(b >= -eps):
            key = (int(fl[k]), k)
            if best is None or key > best:
                best = key
                best_bary = b
    if best is not None:
        return ControlPoint(face_index=best[1], bary=_clamped_bary(best_bary))
    d = np.array(
        [point_triangle_distance(tris[k], q[None, :])[0] for k in range(p.n_faces)]
    )
    k = int(np.argmin(d))
    nearest_pt, dist = closest_point_on_triangle(tris[k], q)
    b = barycentric(tris[k], nearest_pt)
    if not np.all(np.isfinite(b)):
        b = np.array([1.0, 0.0, 0.0])
    raise LocateMiss(
        q, dist, ControlPoint(face_index=k, bary=_clamped_bary(b)), nearest_pt
    )


def locate_point_or_nearest(
    p: Puppet, s: DeformState, q
) -> tuple[ControlPoint, bool, float]:
    """locate_point with the miss folded into the result: returns
    (control point, missed flag, distance to mesh)."""
    try:
        return locate_point(p, s, q), False, 0.0
    except LocateMiss as miss:
        return miss.nearest, True, miss.distance


def eval_control_point(p: Puppet, s: DeformState, c: ControlPoint) -> np.ndarray:
    """Position of a control point under a deform state: the barycentric
    combination of its face's vertices, so the map is linear in them."""
    if not (0 <= c.face_index < p.n_faces):
        raise ValidationError(
            f"control point face {c.face_index} out of range for {p.n_faces} faces"
        )
    return np.asarray(c.bary, dtype=np.float64) @ s.vertices[p.faces[c.face_index]]


def cotangent_weights(p: Puppet):
    """Per-undirected-edge cotangent weights on the rest pose.

    w_ij = 0.5 * sum of cot(angle opposite edge ij) over incident faces,
    clamped at 0 from below. Degenerate rest faces are rejected."""
    acc: dict[tuple[int, int], float] = {}
    v = p.rest_vertices
    for k, (a, b, c) in enumerate(p.faces):
        pa, pb, pc = v[int(a)], v[int(b)], v[int(c)]
        cross = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        if abs(cross) < 1e-14:
            raise ValidationError(f"degenerate rest face {k} has zero area")
        area2 = abs(cross)
        for (i, j, o) in ((int(b), int(c), pa), (int(c), int(a), pb), (int(a), int(b), pc)):
            e1 = v[i] - o
            e2 = v[j] - o
            cot = float(e1 @ e2) / area2
            key = (min(i, j), max(i, j))
            acc[key] = acc.get(key, 0.0) + 0.5 * cot
    edges = np.array(sorted(acc.keys()), dtype=np.int64).reshape(-1, 2)
    weights = np.array([max(acc[(int(i), int(j))], 0.0) for i, j in edges])
    return EdgeWeights(edges=edges, weights=weights)


@dataclass(frozen=True)
class EdgeWeights:
    edges: np.ndarray  # (E,2) int64, i<j, lexicographically sorted
    weights: np.ndarray  # (E,) float64, >=0

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {
            (int(i), int(j)): float(w)
            for (i, j), w in zip(self.edges, self.weights)
        }


# ---------------------------------------------------------------------------
# file formats


def save_puppet(p: Puppet, path) -> None:
    """Write the puppet JSON next to its texture PNG (8-bit RGBA)."""
    path = Path(path)
    tex_name = path.stem + "_texture.png"
    save_rgba(path.parent / tex_name, p.texture)
    doc = {
        "vertices": [[float(x), float(y)] for x, y in p.rest_vertices],
        "faces": [[int(a), int(b), int(c)] for a, b, c in p.faces],
        "layers": [
            {"name": l.name, "face_start": l.face_start, "face_end": l.face_end}
            for l in p.layers
        ],
        "joints": [[int(a), int(b)] for a, b in p.joints],
        "uv": [[float(u), float(v)] for u, v in p.uv],
        "texture": tex_name,
    }
    path.write_text(json.dumps(doc, indent=1))


def load_puppet(path) -> Puppet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"puppet file {path}: invalid JSON ({e})") from e
    for key in ("vertices", "faces", "layers", "joints", "uv", "texture"):
        if key not in doc:
            raise ValidationError(f"puppet file {path}: missing field '{key}'")
    tex_path = path.parent / doc["texture"]
    if not tex_path.exists():
        raise ValidationError(f"puppet file {path}: texture {tex_path} not found")
    layers = tuple(
        Layer(str(l["name"]), int(l["face_start"]), int(l["face_end"]))
        for l in doc["layers"]
    )
    joints = np.asarray(doc["joints"], dtype=np.int64)
    if joints.size == 0:
        joints = np.zeros((0, 2), dtype=np.int64)
    p = Puppet(
        rest_vertices=np.asarray(doc["vertices"], dtype=np.float64),
        faces=np.asarray(doc["faces"], dtype=np.int64),
        layers=layers,
        joints=joints,
        uv=np.asarray(doc["uv"], dtype=np.float64),
        texture=load_rgba(tex_path),
    )
    validate_puppet(p)
    return p


def load_parts(path) -> list[Part]:
    """Read the build input: {"parts":[{"name","outline","texture"},...]},
    parts ordered back to front, texture paths relative to the JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"parts file {path}: invalid JSON ({e})") from e
    if "parts" not in doc or not isinstance(doc["parts"], list) or not doc["parts"]:
        raise ValidationError(f"parts file {path}: needs a non-empty 'parts' list")
    parts = []
    for i, entry in enumerate(doc["parts"]):
        for key in ("name", "outline"):
            if key not in entry:
                raise ValidationError(f"parts file {path}: parts[{i}] missing '{key}'")
        tex = None
        if entry.get("texture"):
            tex_path = path.parent / entry["texture"]
            if not tex_path.exists():
                raise ValidationError(
                    f"parts file {path}: texture {tex_path} not found"
                )
            tex = load_rgba(tex_path)
        parts.append(
            Part(
                name=str(entry["name"]),
                outline=np.asarray(entry["outline"], dtype=np.float64),
                texture=tex,
            )
        )
    return parts
