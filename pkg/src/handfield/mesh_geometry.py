"""Point-to-mesh projection, uvh canonicalization and coarse depth rasterization.

Closest-point queries go through an axis-aligned BVH over the posed triangles.
The sign of a projection comes from angle-weighted pseudonormals, so points just
outside an edge or vertex get a consistent inside/outside answer.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy import ndimage

from .camera import Camera, ConfigError
from .hand_model import PosedMesh

LEAF_SIZE = 4
SIGN_EPS = 1e-12
_KERNEL_LOCK = threading.Lock()  # numba's parallel kernels must not be entered concurrently

# closest-feature codes returned by the point/triangle routine
INTERIOR, VERT0, VERT1, VERT2, EDGE01, EDGE12, EDGE20 = range(7)


@dataclass
class TriangleBVH:
    """Flattened BVH; node ``i`` is a leaf iff ``count[i] > 0``."""

    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray  # triangle ids in leaf order
    tris: np.ndarray  # (F, 3, 3) triangle corners
    face_normals: np.ndarray  # (F, 3)
    vertex_pn: np.ndarray  # (F, 3, 3) pseudonormal of each corner vertex
    edge_pn: np.ndarray  # (F, 3, 3) pseudonormal of edges 01, 12, 20

    @property
    def num_nodes(self) -> int:
        return int(self.count.shape[0])


@dataclass
class SurfaceProjection:
    triangle_id: int
    barycentric: np.ndarray
    point: np.ndarray
    distance: float
    sign: float


@dataclass
class UVHCoord:
    u: float
    v: float
    h: float


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W) distance along the unit ray; +inf for misses
    near: float
    far: float
    triangle_id: np.ndarray | None = None
    barycentric: np.ndarray | None = None

    sentinel = np.inf

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.depth)


def _pseudonormals(mesh: PosedMesh):
    v, f = mesh.vertices, mesh.faces
    tri = v[f]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)
    vn = np.zeros_like(v)
    for c in range(3):
        e1 = tri[:, (c + 1) % 3] - tri[:, c]
        e2 = tri[:, (c + 2) % 3] - tri[:, c]
        cosang = np.einsum("ij,ij->i", e1, e2) / (np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
        np.add.at(vn, f[:, c], fn * np.arccos(np.clip(cosang, -1.0, 1.0))[:, None])
    edges = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1)  # (F, 3, 2)
    keys = np.sort(edges, axis=2).reshape(-1, 2)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    en = np.zeros((inv.max() + 1 if inv.size else 0, 3))
    np.add.at(en, inv, np.repeat(fn, 3, axis=0))
    return fn, vn[f], en[inv].reshape(-1, 3, 3)


def build_bvh(mesh: PosedMesh) -> TriangleBVH:
    tris = np.ascontiguousarray(mesh.vertices[mesh.faces], dtype=np.float64).reshape(-1, 3, 3)
    nf = tris.shape[0]
    lo_t, hi_t = tris.min(axis=1), tris.max(axis=1)
    cent = tris.mean(axis=1)
    bmin, bmax, left, right, start, count = [], [], [], [], [], []
    order = np.arange(nf)

    def new_node():
        for arr in (left, right, start, count):
            arr.append(-1)
        bmin.append(np.zeros(3))
        bmax.append(np.zeros(3))
        return len(count) - 1

    def build(node, lo, hi):
        ids = order[lo:hi]
        bmin[node] = lo_t[ids].min(axis=0) if hi > lo else np.zeros(3)
        bmax[node] = hi_t[ids].max(axis=0) if hi > lo else np.zeros(3)
        if hi - lo <= LEAF_SIZE:
            start[node], count[node] = lo, hi - lo
            return
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = (hi - lo) // 2
        part = np.argsort(c[:, axis], kind="stable")
        order[lo:hi] = ids[part]
        lo_child, hi_child = new_node(), new_node()
        left[node], right[node] = lo_child, hi_child
        count[node] = 0
        build(lo_child, lo, lo + mid)
        build(hi_child, lo + mid, hi)

    root = new_node()
    build(root, 0, nf)
    if nf:
        fn, vpn, epn = _pseudonormals(mesh)
    else:
        fn, vpn, epn = np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3, 3))
    return TriangleBVH(
        np.asarray(bmin), np.asarray(bmax),
        np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
        np.asarray(start, dtype=np.int64), np.asarray(count, dtype=np.int64),
        order.astype(np.int64), tris, fn, vpn, epn,
    )


@nb.njit(cache=True, inline="always")
def _dot(a0, a1, a2, b0, b1, b2):
    return a0 * b0 + a1 * b1 + a2 * b2


@nb.njit(cache=True)
def _closest_on_triangle(p, tri):
    """Ericson's region test. Returns (b0, b1, b2, feature code)."""
    ax, ay, az = tri[0, 0], tri[0, 1], tri[0, 2]
    abx, aby, abz = tri[1, 0] - ax, tri[1, 1] - ay, tri[1, 2] - az
    acx, acy, acz = tri[2, 0] - ax, tri[2, 1] - ay, tri[2, 2] - az
    apx, apy, apz = p[0] - ax, p[1] - ay, p[2] - az
    d1 = _dot(abx, aby, abz, apx, apy, apz)
    d2 = _dot(acx, acy, acz, apx, apy, apz)
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0, VERT0
    bpx, bpy, bpz = p[0] - tri[1, 0], p[1] - tri[1, 1], p[2] - tri[1, 2]
    d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
    d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0, VERT1
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0, EDGE01
    cpx, cpy, cpz = p[0] - tri[2, 0], p[1] - tri[2, 1], p[2] - tri[2, 2]
    d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
    d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0, VERT2
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w, EDGE20
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w, EDGE12
    denom = 1.0 / (va + vb + vc)
    return va * denom, vb * denom, vc * denom, INTERIOR


@nb.njit(cache=True)
def _point_tri_dist2(p, tri):
    b0, b1, b2, code = _closest_on_triangle(p, tri)
    qx = b0 * tri[0, 0] + b1 * tri[1, 0] + b2 * tri[2, 0]
    qy = b0 * tri[0, 1] + b1 * tri[1, 1] + b2 * tri[2, 1]
    qz = b0 * tri[0, 2] + b1 * tri[1, 2] + b2 * tri[2, 2]
    dx, dy, dz = p[0] - qx, p[1] - qy, p[2] - qz
    return dx * dx + dy * dy + dz * dz, b0, b1, b2, code


@nb.njit(cache=True)
def _box_dist2(p, lo, hi):
    d = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            d += (p[k] - hi[k]) ** 2
    return d


@nb.njit(cache=True)
def _query_bvh(p, bmin, bmax, left, right, start, count, order, tris):
    best = np.inf
    best_f = -1
    bb0 = bb1 = bb2 = 0.0
    best_code = -1
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        # slack keeps exact-tie triangles reachable despite box rounding
        if _box_dist2(p, bmin[node], bmax[node]) > best * (1.0 + 1e-9):
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                f = order[k]
                d2, b0, b1, b2, code = _point_tri_dist2(p, tris[f])
                if d2 < best or (d2 == best and f < best_f):
                    best, best_f = d2, f
                    bb0, bb1, bb2, best_code = b0, b1, b2, code
        else:
            l, r = left[node], right[node]
            dl = _box_dist2(p, bmin[l], bmax[l])
            dr = _box_dist2(p, bmin[r], bmax[r])
            # push the farther child first so the nearer one is visited first
            if dl <= dr:
                stack[sp] = r
                stack[sp + 1] = l
            else:
                stack[sp] = l
                stack[sp + 1] = r
            sp += 2
    return best_f, bb0, bb1, bb2, best_code


@nb.njit(cache=True)
def _brute_force(p, tris):
    best = np.inf
    best_f = -1
    bb0 = bb1 = bb2 = 0.0
    best_code = -1
    for f in range(tris.shape[0]):
        d2, b0, b1, b2, code = _point_tri_dist2(p, tris[f])
        if d2 < best:
            best, best_f = d2, f
            bb0, bb1, bb2, best_code = b0, b1, b2, code
    return best_f, bb0, bb1, bb2, best_code


@nb.njit(cache=True, parallel=True)
def _project_many(points, bmin, bmax, left, right, start, count, order, tris, fn, vpn, epn, brute):
    n = points.shape[0]
    tri_id = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 3))
    foot = np.empty((n, 3))
    dist = np.empty(n)
    sign = np.empty(n)
    for i in nb.prange(n):
        p = points[i]
        if brute:
            f, b0, b1, b2, code = _brute_force(p, tris)
        else:
            f, b0, b1, b2, code = _query_bvh(p, bmin, bmax, left, right, start, count, order, tris)
        tri_id[i] = f
        bary[i, 0], bary[i, 1], bary[i, 2] = b0, b1, b2
        tri = tris[f]
        d2 = 0.0
        for k in range(3):
            q = b0 * tri[0, k] + b1 * tri[1, k] + b2 * tri[2, k]
            foot[i, k] = q
            d2 += (p[k] - q) ** 2
        dist[i] = np.sqrt(d2)
        if code == INTERIOR:
            nrm = fn[f]
        elif code <= VERT2:
            nrm = vpn[f, code - VERT0]
        else:
            nrm = epn[f, code - EDGE01]
        s = 0.0
        for k in range(3):
            s += (p[k] - foot[i, k]) * nrm[k]
        sign[i] = -1.0 if s < -SIGN_EPS else 1.0
    return tri_id, bary, foot, dist, sign


def project_points(bvh: TriangleBVH, points: np.ndarray, brute_force: bool = False):
    """Vectorized closest-point query.

    Returns ``(triangle_id, barycentric, foot_point, distance, sign)`` arrays.
    ``brute_force`` scans every triangle instead of walking the tree.
    """
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    if bvh.tris.shape[0] == 0:
        raise ValueError("cannot project onto an empty mesh")
    with _KERNEL_LOCK:
        return _project_many(
            pts, bvh.bmin, bvh.bmax, bvh.left, bvh.right, bvh.start, bvh.count, bvh.order,
            bvh.tris, bvh.face_normals, bvh.vertex_pn, bvh.edge_pn, brute_force,
        )


def closest_point(bvh: TriangleBVH, mesh: PosedMesh, x) -> SurfaceProjection:
    tri, bary, foot, dist, sign = project_points(bvh, np.asarray(x)[None])
    return SurfaceProjection(int(tri[0]), bary[0], foot[0], float(dist[0]), float(sign[0]))


def canonicalize_many(bvh: TriangleBVH, mesh: PosedMesh, points: np.ndarray) -> np.ndarray:
    """(N, 3) world points -> (N, 3) array of (u, v, h)."""
    tri, bary, _, dist, sign = project_points(bvh, points)
    uv = np.matmul(bary[:, None, :], mesh.corner_uv[tri])[:, 0, :]
    return np.concatenate([uv, (sign * dist)[:, None]], axis=1)


def canonicalize(x, bvh: TriangleBVH, mesh: PosedMesh) -> UVHCoord:
    u, v, h = canonicalize_many(bvh, mesh, np.asarray(x, dtype=np.float64)[None])[0]
    return UVHCoord(float(u), float(v), float(h))


# ---------------------------------------------------------------------------
# rasterization


@nb.njit(cache=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@nb.njit(cache=True, inline="always")
def _top_left(ax, ay, bx, by):
    # in y-down image space with positive-area winding, top edges are horizontal
    # and run toward -x, left edges run toward +y
    dy = by - ay
    dx = bx - ax
    return (dy == 0.0 and dx < 0.0) or dy > 0.0


@nb.njit(cache=True)
def _rasterize(vc, faces, fx, fy, cx, cy, width, height, near, far):
    depth = np.full((height, width), np.inf)
    zbuf = np.full((height, width), np.inf)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = vc[i0, 2], vc[i1, 2], vc[i2, 2]
        if z0 <= 0.0 or z1 <= 0.0 or z2 <= 0.0:
            continue
        x0, y0 = fx * vc[i0, 0] / z0 + cx, fy * vc[i0, 1] / z0 + cy
        x1, y1 = fx * vc[i1, 0] / z1 + cx, fy * vc[i1, 1] / z1 + cy
        x2, y2 = fx * vc[i2, 0] / z2 + cx, fy * vc[i2, 1] / z2 + cy
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0.0:
            continue
        c1, c2 = 1, 2
        if area < 0.0:
            x1, y1, x2, y2 = x2, y2, x1, y1
            z1, z2 = z2, z1
            c1, c2 = 2, 1
            area = -area
        xmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        tl0 = _top_left(x1, y1, x2, y2)
        tl1 = _top_left(x2, y2, x0, y0)
        tl2 = _top_left(x0, y0, x1, y1)
        for py in range(ymin, ymax + 1):
            sy = py + 0.5
            for px in range(xmin, xmax + 1):
                sx = px + 0.5
                w0 = _edge(x1, y1, x2, y2, sx, sy)
                w1 = _edge(x2, y2, x0, y0, sx, sy)
                w2 = _edge(x0, y0, x1, y1, sx, sy)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not tl0) or (w1 == 0.0 and not tl1) or (w2 == 0.0 and not tl2):
                    continue
                l0, l1, l2 = w0 / area, w1 / area, w2 / area
                inv_z = l0 / z0 + l1 / z1 + l2 / z2
                z = 1.0 / inv_z
                rx = (sx - cx) / fx
                ry = (sy - cy) / fy
                t = z * np.sqrt(rx * rx + ry * ry + 1.0)
                if t < near or t > far:
                    continue
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    depth[py, px] = t
                    tri_id[py, px] = f
                    pb0 = l0 / z0 * z
                    pb1 = l1 / z1 * z
                    pb2 = l2 / z2 * z
                    bary[py, px, 0] = pb0
                    bary[py, px, c1] = pb1
                    bary[py, px, c2] = pb2
    return depth, tri_id, bary


def rasterize_depth(mesh: PosedMesh, camera: Camera, width: int | None = None, height: int | None = None) -> DepthMap:
    """Z-buffered perspective rasterization of ``mesh``; depth is distance along each pixel ray.

    Triangles with a vertex at or behind the camera plane are skipped (no clipping).
    """
    if not (camera.fx > 0 and camera.fy > 0):
        raise ConfigError("degenerate camera: focal length must be positive")
    if width is not None and width != camera.width:
        camera = camera.scaled(width / camera.width)
    height = camera.height if height is None else height
    vc = np.ascontiguousarray(camera.world_to_cam(mesh.vertices)) if mesh.vertices.size else np.zeros((0, 3))
    faces = np.ascontiguousarray(mesh.faces, dtype=np.int64).reshape(-1, 3)
    depth, tri_id, bary = _rasterize(
        vc, faces, camera.fx, camera.fy, camera.cx, camera.cy, camera.width, height, camera.near, camera.far,
    )
    return DepthMap(depth, camera.near, camera.far, tri_id, bary)


def ray_bounds_image(depth: DepthMap, margin: float, dilation: int = 3):
    """Per-pixel sampling interval around the coarse surface.

    Returns ``(t_near, t_far, valid)``. Miss pixels borrow the min/max depth of
    hits within ``dilation`` pixels (Chebyshev distance); pixels with no such
    neighbor are invalid and render as background.
    """
    if margin <= 0:
        raise ConfigError("sampling margin must be positive")
    d = depth.depth
    hit = np.isfinite(d)
    lo, hi = d.copy(), d.copy()
    if dilation > 0:
        size = 2 * dilation + 1
        lo_n = ndimage.minimum_filter(np.where(hit, d, np.inf), size=size, mode="constant", cval=np.inf)
        hi_n = ndimage.maximum_filter(np.where(hit, d, -np.inf), size=size, mode="constant", cval=-np.inf)
        lo = np.where(hit, d, lo_n)
        hi = np.where(hit, d, hi_n)
    valid = np.isfinite(lo) & np.isfinite(hi)
    t_near = np.where(valid, np.maximum(lo - margin, depth.near), 0.0)
    t_far = np.where(valid, np.minimum(hi + margin, depth.far), 0.0)
    return t_near, t_far, valid


def ray_bounds(depth: DepthMap, pixel, margin: float, dilation: int = 3):
    """Sampling interval ``(t_near, t_far)`` for one pixel ``(row, col)``, or None."""
    if margin <= 0:
        raise ConfigError("sampling margin must be positive")
    i, j = pixel
    d = depth.depth
    if np.isfinite(d[i, j]):
        lo = hi = d[i, j]
    else:
        win = d[max(i - dilation, 0): i + dilation + 1, max(j - dilation, 0): j + dilation + 1]
        hits = win[np.isfinite(win)]
        if hits.size == 0:
            return None
        lo, hi = hits.min(), hits.max()
    return max(lo - margin, depth.near), min(hi + margin, depth.far)


def mean_edge_length(mesh: PosedMesh) -> float:
    tri = mesh.vertices[mesh.faces]
    e = np.concatenate([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 1], tri[:, 0] - tri[:, 2]])
    return float(np.linalg.norm(e, axis=1).mean())
