"""Articulated hand proxy: rigged template, forward kinematics and linear blend skinning.

A hand is controlled by a 61-d parameter vector (45 articulation angles, 10 shape
coefficients, global translation and global axis-angle rotation). The template
is a generic rigged triangle mesh; :func:`toy_hand` builds a procedural one so
nothing has to be downloaded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_JOINTS = 16
NUM_SHAPE = 10


class TemplateError(ValueError):
    """A rigged template failed validation."""


@dataclass
class HandParams:
    theta: np.ndarray = field(default_factory=lambda: np.zeros(45))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(NUM_SHAPE))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name, n in (("theta", 45), ("beta", NUM_SHAPE), ("t", 3), ("R", 3)):
            value = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if value.shape != (n,):
                raise ValueError(f"{name} must have length {n}, got {value.shape[0]}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, value)

    @property
    def pose(self) -> "HandPose":
        return HandPose(np.concatenate([self.theta, self.R]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.beta, self.t, self.R])

    @classmethod
    def from_vector(cls, vec) -> "HandParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (61,):
            raise ValueError(f"hand parameter vector must have length 61, got {vec.shape}")
        return cls(vec[:45], vec[45:55], vec[55:58], vec[58:61])

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("theta", "beta", "t", "R")}

    @classmethod
    def from_dict(cls, d: dict) -> "HandParams":
        return cls(
            np.asarray(d.get("theta", np.zeros(45)), dtype=np.float64),
            np.asarray(d.get("beta", np.zeros(NUM_SHAPE)), dtype=np.float64),
            np.asarray(d.get("t", np.zeros(3)), dtype=np.float64),
            np.asarray(d.get("R", np.zeros(3)), dtype=np.float64),
        )


@dataclass(frozen=True)
class HandPose:
    """Articulation plus global orientation, ``xi = [theta | R]`` (48-d)."""

    xi: np.ndarray

    def __post_init__(self):
        if np.asarray(self.xi).shape != (48,):
            raise ValueError("hand pose must have length 48")

    @property
    def theta(self) -> np.ndarray:
        return self.xi[:45]

    @property
    def R(self) -> np.ndarray:
        return self.xi[45:]


@dataclass
class RiggedTemplate:
    rest_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    corner_uv: np.ndarray  # (F, 3, 2)
    skin_weights: np.ndarray  # (V, J)
    joint_parents: np.ndarray  # (J,) int, -1 for root
    joint_rest_positions: np.ndarray  # (J, 3)
    shape_basis: np.ndarray | None = None  # (V, 3, 10)

    @property
    def num_joints(self) -> int:
        return int(self.joint_parents.shape[0])

    def validate(self) -> None:
        v = self.rest_vertices
        if v.ndim != 2 or v.shape[1] != 3:
            raise TemplateError(f"vertices must be (V, 3), got {v.shape}")
        nv = v.shape[0]
        f = self.faces
        if f.ndim != 2 or f.shape[1] != 3:
            raise TemplateError(f"faces must be (F, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= nv):
            raise TemplateError("face index out of range")
        if self.corner_uv.shape != (f.shape[0], 3, 2):
            raise TemplateError(f"corner_uv must be (F, 3, 2), got {self.corner_uv.shape}")
        w = self.skin_weights
        j = self.joint_parents.shape[0]
        if w.shape != (nv, j):
            raise TemplateError(f"skin_weights must be ({nv}, {j}), got {w.shape}")
        if np.any(w < 0):
            raise TemplateError("skin weights must be non-negative")
        bad = np.abs(w.sum(axis=1) - 1.0) > 1e-6
        if np.any(bad):
            raise TemplateError(f"weights row not normalized (row {int(np.argmax(bad))})")
        if self.joint_rest_positions.shape != (j, 3):
            raise TemplateError("joint_rest must be (J, 3)")
        _check_tree(self.joint_parents)
        if f.size:
            tri = v[f]
            area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
            if np.any(area2 <= 1e-14):
                raise TemplateError(f"degenerate triangle {int(np.argmin(area2))}")
        if self.shape_basis is not None and self.shape_basis.shape != (nv, 3, NUM_SHAPE):
            raise TemplateError(f"shape_basis must be ({nv}, 3, {NUM_SHAPE})")
        for name in ("rest_vertices", "corner_uv", "skin_weights", "joint_rest_positions"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise TemplateError(f"{name} has non-finite entries")


def _check_tree(parents: np.ndarray) -> None:
    j = parents.shape[0]
    if j == 0 or parents[0] != -1:
        raise TemplateError("joint 0 must be the root (parent -1)")
    for i in range(1, j):
        p = int(parents[i])
        if p < 0 or p >= j:
            raise TemplateError(f"joint {i} has invalid parent {p}")
    for i in range(j):
        seen = set()
        k = i
        while k != -1:
            if k in seen:
                raise TemplateError("joint tree has cycle")
            seen.add(k)
            k = int(parents[k])


@dataclass
class PosedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    corner_uv: np.ndarray
    vertex_normals: np.ndarray

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (angle = norm)."""
    v = np.asarray(axis_angle, dtype=np.float64)
    th2 = float(v @ v)
    if th2 < 1e-12:
        # series keeps the map smooth (and exact at zero)
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        th = np.sqrt(th2)
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / th2
    k = _skew(v)
    return np.eye(3) + a * k + b * (k @ k)


def forward_kinematics(template: RiggedTemplate, pose: HandPose) -> np.ndarray:
    """Per-joint global 4x4 transforms mapping rest space to posed space (no translation)."""
    parents = template.joint_parents
    rest = template.joint_rest_positions
    nj = parents.shape[0]
    theta = np.asarray(pose.theta).reshape(-1, 3)
    out = np.zeros((nj, 4, 4))
    root = np.eye(4)
    root[:3, :3] = rodrigues(pose.R)
    out[0] = root
    for j in range(1, nj):
        local = np.eye(4)
        r = rodrigues(theta[j - 1]) if j - 1 < theta.shape[0] else np.eye(3)
        local[:3, :3] = r
        local[:3, 3] = rest[j] - r @ rest[j]
        out[j] = out[parents[j]] @ local
    return out


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Angle-weighted unit vertex normals."""
    normals = np.zeros_like(vertices)
    if faces.size == 0:
        return normals
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)
    for c in range(3):
        e1 = tri[:, (c + 1) % 3] - tri[:, c]
        e2 = tri[:, (c + 2) % 3] - tri[:, c]
        cosang = np.einsum("ij,ij->i", e1, e2) / (
            np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
        )
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(normals, faces[:, c], fn * ang[:, None])
    length = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(length > 0, length, 1.0)


def skin(template: RiggedTemplate, params: HandParams) -> PosedMesh:
    """Pose the template with linear blend skinning."""
    rest = template.rest_vertices
    if template.shape_basis is not None:
        rest = rest + np.einsum("vck,k->vc", template.shape_basis, params.beta)
    transforms = forward_kinematics(template, params.pose)
    # blend (T_j - I) so the identity pose reproduces the rest mesh bit-exactly
    delta = transforms.copy()
    delta[:, :3, :3] -= np.eye(3)
    blended = np.einsum("vj,jab->vab", template.skin_weights, delta)
    verts = rest + np.einsum("vab,vb->va", blended[:, :3, :3], rest) + blended[:, :3, 3]
    verts = verts + params.t
    return PosedMesh(
        vertices=verts,
        faces=template.faces,
        corner_uv=template.corner_uv,
        vertex_normals=vertex_normals(verts, template.faces),
    )


def save_template(template: RiggedTemplate, path) -> None:
    doc = {
        "vertices": template.rest_vertices.tolist(),
        "faces": template.faces.tolist(),
        "corner_uv": template.corner_uv.tolist(),
        "skin_weights": template.skin_weights.tolist(),
        "joint_parents": template.joint_parents.tolist(),
        "joint_rest": template.joint_rest_positions.tolist(),
    }
    if template.shape_basis is not None:
        doc["shape_basis"] = template.shape_basis.tolist()
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_template(path) -> RiggedTemplate:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise TemplateError(f"cannot read template {path}: {exc}") from exc
    missing = [k for k in ("vertices", "faces", "corner_uv", "skin_weights", "joint_parents", "joint_rest") if k not in doc]
    if missing:
        raise TemplateError(f"template missing fields: {', '.join(missing)}")
    faces = np.asarray(doc["faces"], dtype=np.int64).reshape(-1, 3)
    template = RiggedTemplate(
        rest_vertices=np.asarray(doc["vertices"], dtype=np.float64).reshape(-1, 3),
        faces=faces,
        corner_uv=np.asarray(doc["corner_uv"], dtype=np.float64).reshape(faces.shape[0], 3, 2),
        skin_weights=np.asarray(doc["skin_weights"], dtype=np.float64),
        joint_parents=np.asarray(doc["joint_parents"], dtype=np.int64),
        joint_rest_positions=np.asarray(doc["joint_rest"], dtype=np.float64),
        shape_basis=(
            np.asarray(doc["shape_basis"], dtype=np.float64) if doc.get("shape_basis") is not None else None
        ),
    )
    template.validate()
    return template


# ---------------------------------------------------------------------------
# procedural toy hand

PALM_LO = np.array([-0.04, 0.0, -0.012])
PALM_HI = np.array([0.04, 0.09, 0.012])


@dataclass(frozen=True)
class FingerSpec:
    base: tuple
    axis: tuple
    radius: float
    segments: tuple  # proximal, middle, distal lengths


# thumb first, then index..pinky; joints 1+3f .. 3+3f
FINGERS = (
    FingerSpec((-0.038, 0.03, -0.002), (-0.62, 0.72, -0.3), 0.0095, (0.032, 0.028, 0.024)),
    FingerSpec((-0.03, 0.09, 0.0), (0.0, 1.0, 0.0), 0.0085, (0.034, 0.025, 0.02)),
    FingerSpec((-0.01, 0.09, 0.0), (0.0, 1.0, 0.0), 0.009, (0.038, 0.027, 0.021)),
    FingerSpec((0.01, 0.09, 0.0), (0.0, 1.0, 0.0), 0.0085, (0.035, 0.026, 0.02)),
    FingerSpec((0.03, 0.09, 0.0), (0.0, 1.0, 0.0), 0.0075, (0.028, 0.02, 0.018)),
)

FINGER_U0 = 0.5  # finger charts occupy u in [0.5, 1.0], one 0.1-wide column each
FINGER_U_WIDTH = 0.09
BLEND_HALF_WIDTH = 0.004


def finger_frame(spec: FingerSpec):
    a = np.asarray(spec.axis, dtype=np.float64)
    a /= np.linalg.norm(a)
    e1 = np.cross(a, [0.0, 0.0, 1.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(e1, a)
    return a, e1, e2


def _weld(verts, faces, tol=1e-9):
    key = np.round(verts / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    return verts[first], inverse[faces]


def _box(lo, hi, div):
    """Subdivided axis-aligned box with outward winding and a per-side uv chart."""
    ex = hi - lo
    # (origin, a-axis, b-axis, subdivisions, uv rect)
    sides = [
        ((lo[0], lo[1], hi[2]), (ex[0], 0, 0), (0, ex[1], 0), (div[0], div[1]), (0.02, 0.02, 0.43, 0.43)),
        ((lo[0], lo[1], lo[2]), (0, ex[1], 0), (ex[0], 0, 0), (div[1], div[0]), (0.02, 0.52, 0.43, 0.93)),
        ((hi[0], lo[1], lo[2]), (0, ex[1], 0), (0, 0, ex[2]), (div[1], div[2]), (0.0, 0.44, 0.2, 0.5)),
        ((lo[0], lo[1], lo[2]), (0, 0, ex[2]), (0, ex[1], 0), (div[2], div[1]), (0.25, 0.44, 0.45, 0.5)),
        ((lo[0], hi[1], lo[2]), (0, 0, ex[2]), (ex[0], 0, 0), (div[2], div[0]), (0.0, 0.94, 0.2, 1.0)),
        ((lo[0], lo[1], lo[2]), (ex[0], 0, 0), (0, 0, ex[2]), (div[0], div[2]), (0.25, 0.94, 0.45, 1.0)),
    ]
    verts, faces, uvs = [], [], []
    for origin, da, db, (na, nb), (u0, v0, u1, v1) in sides:
        o, da, db = np.asarray(origin, float), np.asarray(da, float), np.asarray(db, float)
        base = sum(len(x) for x in verts)
        ia, ib = np.meshgrid(np.arange(na + 1), np.arange(nb + 1), indexing="ij")
        p = o + (ia[..., None] / na) * da + (ib[..., None] / nb) * db
        verts.append(p.reshape(-1, 3))
        uv = np.stack([u0 + (u1 - u0) * ia / na, v0 + (v1 - v0) * ib / nb], axis=-1).reshape(-1, 2)
        idx = lambda i, j: base + i * (nb + 1) + j  # noqa: E731
        for i in range(na):
            for j in range(nb):
                q00, q10, q01, q11 = idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)
                for tri in ((q00, q10, q11), (q00, q11, q01)):
                    faces.append(tri)
                    uvs.append([uv[t - base] for t in tri])
    verts = np.concatenate(verts)
    faces = np.asarray(faces)
    return verts, faces, np.asarray(uvs)


def _finger(spec: FingerSpec, column: int, n_around: int = 10, ring_step: float = 0.005):
    a, e1, e2 = finger_frame(spec)
    base = np.asarray(spec.base, dtype=np.float64)
    r = spec.radius
    length = float(sum(spec.segments))
    n_body = max(2, int(np.ceil(length / ring_step)) + 1)
    s_body = np.linspace(0.0, length, n_body)
    radius_body = r * (1.0 - 0.12 * s_body / length)
    r_tip = radius_body[-1]
    caps = np.deg2rad([35.0, 65.0])
    s_rings = np.concatenate([s_body, length + r_tip * np.sin(caps)])
    r_rings = np.concatenate([radius_body, r_tip * np.cos(caps)])
    s_tip = length + r_tip
    phi = 2 * np.pi * np.arange(n_around) / n_around
    ring_dirs = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    verts = (base + s_rings[:, None, None] * a + r_rings[:, None, None] * ring_dirs).reshape(-1, 3)
    verts = np.vstack([verts, base + s_tip * a])
    s_vert = np.concatenate([np.repeat(s_rings, n_around), [s_tip]])
    tip = verts.shape[0] - 1
    u0 = FINGER_U0 + 0.1 * column

    def uv(i_ring, k):
        return [u0 + FINGER_U_WIDTH * k / n_around, s_rings[i_ring] / s_tip]

    faces, uvs = [], []
    for i in range(len(s_rings) - 1):
        for k in range(n_around):
            k1 = (k + 1) % n_around
            p00, p10 = i * n_around + k, (i + 1) * n_around + k
            p11, p01 = (i + 1) * n_around + k1, i * n_around + k1
            faces.append((p00, p10, p11))
            uvs.append([uv(i, k), uv(i + 1, k), uv(i + 1, k + 1)])
            faces.append((p00, p11, p01))
            uvs.append([uv(i, k), uv(i + 1, k + 1), uv(i, k + 1)])
    last = len(s_rings) - 1
    for k in range(n_around):
        k1 = (k + 1) % n_around
        faces.append((last * n_around + k, tip, last * n_around + k1))
        uvs.append([uv(last, k), [u0 + FINGER_U_WIDTH * (k + 0.5) / n_around, 1.0], uv(last, k + 1)])
    faces = np.asarray(faces)
    uvs = np.asarray(uvs, dtype=np.float64)
    # orient outward w.r.t. the finger axis
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    cen = tri.mean(axis=1)
    s_c = np.clip((cen - base) @ a, 0.0, length)
    flip = np.einsum("ij,ij->i", n, cen - (base + s_c[:, None] * a)) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    uvs[flip] = uvs[flip][:, [0, 2, 1]]
    return verts, faces, uvs, s_vert


def finger_joint_arclengths(spec: FingerSpec) -> tuple:
    s1 = spec.segments[0]
    return (0.0, s1, s1 + spec.segments[1])


def _finger_weights(s: np.ndarray, spec: FingerSpec, first_joint: int, nj: int) -> np.ndarray:
    b = BLEND_HALF_WIDTH
    w = np.zeros((s.shape[0], nj))
    _, s1, s2 = finger_joint_arclengths(spec)
    t_root = np.clip(s / b, 0.0, 1.0)
    t1 = np.clip((s - (s1 - b)) / (2 * b), 0.0, 1.0)
    t2 = np.clip((s - (s2 - b)) / (2 * b), 0.0, 1.0)
    w_root = 0.5 * (1.0 - t_root)
    w_mcp = (1.0 - w_root) * (1.0 - t1)
    w_pip = (1.0 - w_root) * t1 * (1.0 - t2)
    w_dip = (1.0 - w_root) * t1 * t2
    w[:, 0] = w_root
    w[:, first_joint] = w_mcp
    w[:, first_joint + 1] = w_pip
    w[:, first_joint + 2] = w_dip
    return w


def toy_hand() -> RiggedTemplate:
    """Procedural rigged hand: palm box plus five three-segment fingers, 16 joints."""
    nj = NUM_JOINTS
    pv, pf, puv = _box(PALM_LO, PALM_HI, (8, 9, 2))
    pv, pf = _weld(pv, pf)
    verts, faces, uvs, weights = [pv], [pf], [puv], []
    w_palm = np.zeros((pv.shape[0], nj))
    w_palm[:, 0] = 1.0
    weights.append(w_palm)
    parents = [-1]
    joints = [np.zeros(3)]
    offset = pv.shape[0]
    for col, spec in enumerate(FINGERS):
        fv, ff, fuv, s = _finger(spec, col)
        first = 1 + 3 * col
        verts.append(fv)
        faces.append(ff + offset)
        uvs.append(fuv)
        weights.append(_finger_weights(s, spec, first, nj))
        offset += fv.shape[0]
        a, _, _ = finger_frame(spec)
        for k, s_j in enumerate(finger_joint_arclengths(spec)):
            parents.append(0 if k == 0 else first + k - 1)
            joints.append(np.asarray(spec.base) + s_j * a)
    template = RiggedTemplate(
        rest_vertices=np.concatenate(verts),
        faces=np.concatenate(faces).astype(np.int64),
        corner_uv=np.concatenate(uvs),
        skin_weights=np.concatenate(weights),
        joint_parents=np.asarray(parents, dtype=np.int64),
        joint_rest_positions=np.asarray(joints),
    )
    template.validate()
    return template


def flexion_axis(finger: int) -> np.ndarray:
    """Local rotation axis that curls a finger toward the palm (positive angle)."""
    _, e1, _ = finger_frame(FINGERS[finger])
    return -e1
