"""Box-template meshes, OBB fitting, non-rigid registration, deformation
features and the mesh graph convolution.

Part geometry is represented by deforming a subdivided unit-cube template onto
each part, then encoding the deformation per vertex as a 9-vector: the
axis-angle log of the local rotation (3) plus the symmetric scale/shear factor
(6).  The encoding is translation invariant, so the part center travels
separately alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import tensor as T
from .tensor import Tensor


class MeshError(ValueError):
    pass


# symmetric 3x3 packed as (xx, yy, zz, xy, xz, yz)
_SYM_IDX = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]


class Mesh:
    """Triangle mesh with cached connectivity."""

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face indices out of range")
        self._one_ring = None
        self._avg = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def copy(self) -> "Mesh":
        m = Mesh(self.vertices.copy(), self.faces)
        m._one_ring = self._one_ring
        m._avg = self._avg
        return m

    def translated(self, offset) -> "Mesh":
        m = self.copy()
        m.vertices = m.vertices + np.asarray(offset, dtype=np.float64)
        return m

    @property
    def one_ring(self) -> list[np.ndarray]:
        if self._one_ring is None:
            neigh = [set() for _ in range(len(self.vertices))]
            for a, b, c in self.faces:
                neigh[a].update((b, c))
                neigh[b].update((a, c))
                neigh[c].update((a, b))
            self._one_ring = [np.array(sorted(s), dtype=np.int64) for s in neigh]
        return self._one_ring

    def edge_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for a, b, c in self.faces:
            for u, v in ((a, b), (b, c), (c, a)):
                key = (min(u, v), max(u, v))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edge_counts()) + len(self.faces)

    def is_edge_manifold(self) -> bool:
        return all(c == 2 for c in self.edge_counts().values())

    def neighbor_average(self) -> sp.csr_matrix:
        """Sparse (V, V) operator averaging over each vertex's one-ring."""
        if self._avg is None:
            rows, cols, vals = [], [], []
            for i, ring in enumerate(self.one_ring):
                if len(ring) == 0:
                    raise MeshError(f"vertex {i} has an empty one-ring")
                rows.extend([i] * len(ring))
                cols.extend(ring.tolist())
                vals.extend([1.0 / len(ring)] * len(ring))
            self._avg = sp.csr_matrix((vals, (rows, cols)),
                                      shape=(len(self.vertices),) * 2)
        return self._avg

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def vertex_normals_raw(self) -> np.ndarray:
        """Unnormalized area-weighted vertex normals (sum of face crosses)."""
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        face_n = np.cross(b - a, c - a)
        out = np.zeros_like(v)
        for k in range(3):
            np.add.at(out, self.faces[:, k], face_n)
        return out


def load_obj(path) -> Mesh:
    vertices, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not vertices:
        raise MeshError(f"no vertices in {path}")
    return Mesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(path, mesh: Mesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def merge_meshes(meshes: list[Mesh]) -> Mesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return Mesh(np.vstack(verts), np.vstack(faces))


# -- box template ------------------------------------------------------------

_template_cache: dict[int, Mesh] = {}


def make_box_template(segments: int) -> Mesh:
    """Unit cube surface ([-0.5, 0.5]^3) with segments^2 quads per face,
    triangulated.  V = 6*segments^2 + 2."""
    if segments < 1:
        raise MeshError("segments must be >= 1")
    if segments in _template_cache:
        return _template_cache[segments]
    s = segments
    index: dict[tuple[int, int, int], int] = {}
    vertices: list[tuple[float, float, float]] = []

    def vid(key: tuple[int, int, int]) -> int:
        if key not in index:
            index[key] = len(vertices)
            vertices.append(tuple(k / s - 0.5 for k in key))
        return index[key]

    faces: list[tuple[int, int, int]] = []
    # each face: fixed axis at 0 or s, (u, v) sweep the other two axes
    for axis in range(3):
        for side in (0, s):
            u_axis, v_axis = [a for a in range(3) if a != axis]
            flip = (side == s) ^ (axis == 1)  # outward orientation
            for i in range(s):
                for j in range(s):
                    corner = [0, 0, 0]
                    corner[axis] = side
                    quad = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        key = corner.copy()
                        key[u_axis] = i + du
                        key[v_axis] = j + dv
                        quad.append(vid(tuple(key)))
                    a, b, c, d = quad
                    if flip:
                        faces.extend([(a, c, b), (a, d, c)])
                    else:
                        faces.extend([(a, b, c), (a, c, d)])
    mesh = Mesh(np.array(vertices), np.array(faces, dtype=np.int64))
    assert mesh.n_vertices == 6 * s * s + 2
    _template_cache[segments] = mesh
    return mesh


# -- oriented bounding boxes ---------------------------------------------------

MIN_EXTENT = 1e-4


@dataclass
class OBB:
    center: np.ndarray          # (3,)
    axes: np.ndarray            # (3, 3), columns are the box axes
    extents: np.ndarray         # (3,) positive half-lengths

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return self.center + (signs * self.extents) @ self.axes.T

    def quaternion(self) -> np.ndarray:
        return quaternion_from_matrix(self.axes)


def _convex_hull_2d(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull; falls back to the input when collinear."""
    pts = np.unique(np.round(pts, 12), axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def turn(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(seq):
        out: list[np.ndarray] = []
        for p in seq:
            while len(out) >= 2 and turn(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = lower[:-1] + upper[:-1]
    return np.array(hull) if len(hull) >= 3 else pts


def _min_area_direction(xy: np.ndarray) -> np.ndarray:
    """In-plane unit direction of the minimum-area bounding rectangle."""
    hull = _convex_hull_2d(xy)
    best_area, best_u = np.inf, np.array([1.0, 0.0])
    for k in range(len(hull)):
        e = hull[(k + 1) % len(hull)] - hull[k]
        norm = np.linalg.norm(e)
        if norm < 1e-12:
            continue
        u = e / norm
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        area = (pu.max() - pu.min()) * (pv.max() - pv.min())
        if area < best_area - 1e-15:
            best_area, best_u = area, u
    return best_u


def _canonical_eigenbasis(cov: np.ndarray, centered: np.ndarray) -> np.ndarray:
    """Eigenbasis of a covariance with degenerate eigenspaces resolved
    deterministically: 2-fold groups get the in-plane minimum-area rectangle
    frame (tight boxes for square cross-sections at any tilt), the fully
    isotropic case falls back to the world axes."""
    vals, vecs = np.linalg.eigh(cov)
    scale = max(abs(vals).max(), 1e-300)
    tol = 1e-6 * scale
    start = 0
    while start < 3:
        end = start
        while end + 1 < 3 and vals[end + 1] - vals[start] <= tol:
            end += 1
        if end == start + 1:
            plane = vecs[:, start:end + 1].copy()
            u2 = _min_area_direction(centered @ plane)
            v2 = np.array([-u2[1], u2[0]])
            vecs[:, start] = plane @ u2
            vecs[:, end] = plane @ v2
        elif end > start:
            proj = vecs[:, start:end + 1] @ vecs[:, start:end + 1].T
            basis: list[np.ndarray] = []
            for k in range(3):
                w = proj @ np.eye(3)[:, k]
                for b in basis:
                    w = w - b * (b @ w)
                norm = np.linalg.norm(w)
                if norm > 1e-8:
                    basis.append(w / norm)
                if len(basis) == end - start + 1:
                    break
            if len(basis) == end - start + 1:
                vecs[:, start:end + 1] = np.column_stack(basis)
        start = end + 1
    return vecs


def compute_obb(points) -> OBB:
    """PCA-aligned box: axes ordered by descending extent, each axis's
    largest-magnitude component made positive, degenerate extents clamped."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise MeshError("compute_obb: empty point set")
    center = pts.mean(axis=0)
    centered = pts - center
    cov = centered.T @ centered / max(len(pts), 1)
    vecs = _canonical_eigenbasis(cov, centered)
    proj = centered @ vecs
    extents = np.abs(proj).max(axis=0) if len(pts) > 1 else np.zeros(3)
    order = np.argsort(-extents, kind="stable")
    axes = vecs[:, order]
    extents = np.maximum(extents[order], MIN_EXTENT)
    for k in range(3):
        big = np.argmax(np.abs(axes[:, k]))
        if axes[big, k] < 0:
            axes[:, k] = -axes[:, k]
    if np.linalg.det(axes) < 0:
        axes[:, 2] = -axes[:, 2]
    return OBB(center, axes, extents)


def quaternion_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a proper rotation matrix."""
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 1e-12)) * 2
        q = np.zeros(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[i + 1] = 0.25 * s
        q[j + 1] = (m[j, i] + m[i, j]) / s
        q[k + 1] = (m[k, i] + m[i, k]) / s
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


# -- closest points on a triangle soup -----------------------------------------


def closest_points_on_mesh(points: np.ndarray, target: Mesh) -> np.ndarray:
    """Closest point on any target triangle, per query point (vectorized)."""
    tri = target.vertices[target.faces]  # (F, 3, 3)
    p = np.asarray(points, dtype=np.float64)
    best = np.full(len(p), np.inf)
    out = np.zeros_like(p)
    # chunk over faces to bound the (N, F, 3) intermediates
    step = max(1, int(4e6 / max(len(p), 1)))
    for f0 in range(0, len(tri), step):
        sub = tri[f0:f0 + step]
        cp = _closest_point_triangles(p, sub)          # (N, Fc, 3)
        d2 = ((cp - p[:, None, :]) ** 2).sum(axis=2)   # (N, Fc)
        fi = d2.argmin(axis=1)
        dmin = d2[np.arange(len(p)), fi]
        better = dmin < best
        best[better] = dmin[better]
        out[better] = cp[np.arange(len(p)), fi][better]
    return out


def _closest_point_triangles(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Closest point on each triangle for each query (Ericson's method)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]            # (F, 3)
    ab, ac = b - a, c - a
    pa = p[:, None, :] - a[None, :, :]                   # (N, F, 3)
    d1 = (pa * ab).sum(-1)
    d2 = (pa * ac).sum(-1)
    pb = p[:, None, :] - b[None, :, :]
    d3 = (pb * ab).sum(-1)
    d4 = (pb * ac).sum(-1)
    pc = p[:, None, :] - c[None, :, :]
    d5 = (pc * ab).sum(-1)
    d6 = (pc * ac).sum(-1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(np.abs(denom) > 1e-300, vb / denom, 0.0)
        w = np.where(np.abs(denom) > 1e-300, vc / denom, 0.0)
        v_ab = np.where(np.abs(d1 - d3) > 1e-300, d1 / (d1 - d3), 0.0)
        w_ac = np.where(np.abs(d2 - d6) > 1e-300, d2 / (d2 - d6), 0.0)
        wv_bc = np.where(np.abs((d4 - d3) + (d5 - d6)) > 1e-300,
                         (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0)

    result = a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]
    # edge BC region
    on_bc = (d4 - d3 >= 0) & (d5 - d6 >= 0) & (va <= 0)
    t = np.clip(wv_bc, 0.0, 1.0)[..., None]
    result = np.where(on_bc[..., None], b[None] + t * (c - b)[None], result)
    # edge AC region
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t = np.clip(w_ac, 0.0, 1.0)[..., None]
    result = np.where(on_ac[..., None], a[None] + t * ac[None], result)
    # edge AB region
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t = np.clip(v_ab, 0.0, 1.0)[..., None]
    result = np.where(on_ab[..., None], a[None] + t * ab[None], result)
    # vertex regions
    result = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c[None] + 0 * result, result)
    result = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b[None] + 0 * result, result)
    result = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a[None] + 0 * result, result)
    return result


# -- non-rigid registration -----------------------------------------------------


@dataclass
class RegistrationResult:
    mesh: Mesh
    residual: float          # RMS vertex-to-surface distance at the best iterate
    converged: bool
    iterations: int


def _uniform_laplacian(mesh: Mesh) -> sp.csr_matrix:
    n = mesh.n_vertices
    avg = mesh.neighbor_average()
    return sp.identity(n, format="csr") - avg


def register_box_to_part(template: Mesh, target: Mesh, iters: int = 30,
                         w_fit: float = 1.0, w_smooth: float = 0.5,
                         smooth_decay: float = 0.8,
                         tol: float = 1e-3) -> RegistrationResult:
    """Deform the box template onto the target part surface.

    Starts from the template affine-mapped onto the target's OBB, then
    alternates closest-point projection with a Laplacian-regularized
    least-squares vertex update.  Non-convergence within `iters` returns the
    best iterate flagged `converged=False`.
    """
    if target.faces.size == 0:
        raise MeshError("register_box_to_part: target has no faces")
    obb = compute_obb(target.vertices)
    v0 = obb.center + (template.vertices * (2.0 * obb.extents)) @ obb.axes.T
    lap = _uniform_laplacian(template)
    lap_t_lap = (lap.T @ lap).tocsc()
    lap_rhs0 = lap_t_lap @ v0
    n = template.n_vertices
    eye = sp.identity(n, format="csc")

    v = v0.copy()
    best_v, best_res = v.copy(), np.inf
    w_s = w_smooth
    for it in range(iters):
        proj = closest_points_on_mesh(v, target)
        res = float(np.sqrt(((v - proj) ** 2).sum(axis=1).mean()))
        if res < best_res:
            best_res, best_v = res, v.copy()
        if res < tol:
            return RegistrationResult(Mesh(v, template.faces), res, True, it)
        system = (w_fit * eye + w_s * lap_t_lap).tocsc()
        rhs = w_fit * proj + w_s * lap_rhs0
        solve = spla.splu(system)
        v = np.column_stack([solve.solve(rhs[:, k]) for k in range(3)])
        w_s *= smooth_decay
    proj = closest_points_on_mesh(v, target)
    res = float(np.sqrt(((v - proj) ** 2).sum(axis=1).mean()))
    if res < best_res:
        best_res, best_v = res, v.copy()
    return RegistrationResult(Mesh(best_v, template.faces), best_res,
                              best_res < tol, iters)


# -- deformation features (rotation log + symmetric scale) -----------------------


@dataclass
class AcapFeature:
    """Per-vertex deformation encoding plus the part center.

    per_vertex[:, :3] is the axis-angle rotation log (made consistent across
    neighboring vertices so large rotations survive the encoding) and
    per_vertex[:, 3:] packs the symmetric scale/shear factor.  The encoding is
    computed from one-ring edge vectors, so it is invariant to translating the
    part; the center records the lost translation.
    """

    per_vertex: np.ndarray                  # (V, 9)
    center: np.ndarray                      # (3,)
    degenerate_vertices: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.per_vertex = np.asarray(self.per_vertex, dtype=np.float64).reshape(-1, 9)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)


def rotation_log(r: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, angle in [0, pi]."""
    cos = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-10:
        return np.zeros(3)
    if angle > np.pi - 1e-6:
        # near pi: axis from the largest column of R + I
        m = r + np.eye(3)
        col = m[:, np.argmax(np.diag(m))]
        axis = col / np.linalg.norm(col)
        skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if np.dot(axis, skew) < 0:
            axis = -axis
        return axis * angle
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    axis /= (2.0 * np.sin(angle))
    return axis * angle


def rotation_exp(v: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (Rodrigues)."""
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    axis = v / angle
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _polar_decompose(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """T = R S with R a proper rotation and S symmetric."""
    u, _, vt = np.linalg.svd(t)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    s = r.T @ t
    return r, 0.5 * (s + s.T)


def _pack_sym(s: np.ndarray) -> np.ndarray:
    return np.array([s[i, j] for i, j in _SYM_IDX])


def _unpack_sym(v: np.ndarray) -> np.ndarray:
    s = np.zeros((3, 3))
    for val, (i, j) in zip(v, _SYM_IDX):
        s[i, j] = val
        s[j, i] = val
    return s


def _axis_angle_candidates(base: np.ndarray) -> list[np.ndarray]:
    """Equivalent rotation-log vectors of the same rotation."""
    angle = np.linalg.norm(base)
    if angle < 1e-10:
        return [np.zeros(3)]
    axis = base / angle
    return [axis * angle, -axis * (2.0 * np.pi - angle), axis * (angle + 2.0 * np.pi)]


def acap_extract(template: Mesh, deformed: Mesh) -> AcapFeature:
    """Per-vertex rotation/scale encoding of a deformed template."""
    if deformed.n_vertices != template.n_vertices:
        raise MeshError("acap_extract: vertex count mismatch")
    rest, cur = template.vertices, deformed.vertices
    rings = template.one_ring
    n = template.n_vertices
    logs = np.zeros((n, 3))
    syms = np.zeros((n, 6))
    degenerate = []
    norm0 = template.vertex_normals_raw()
    norm1 = deformed.vertex_normals_raw()
    for i in range(n):
        ring = rings[i]
        e0 = rest[ring] - rest[i]
        e1 = cur[ring] - cur[i]
        gram = e0.T @ e0
        if np.linalg.matrix_rank(gram, tol=1e-10 * max(np.trace(gram), 1e-30)) < 3:
            # flat one-ring: complete the edge set with an area-scaled vertex
            # normal pseudo-edge so the normal direction follows the local
            # in-plane scaling instead of collapsing to zero
            len0, len1 = np.linalg.norm(norm0[i]), np.linalg.norm(norm1[i])
            if len0 > 1e-14 and len1 > 1e-14:
                r0 = np.sqrt((e0 ** 2).sum(axis=1)).mean()
                area_scale = np.sqrt(len1 / len0)
                e0 = np.vstack([e0, norm0[i] / len0 * r0])
                e1 = np.vstack([e1, norm1[i] / len1 * r0 * area_scale])
                gram = e0.T @ e0
        if np.linalg.matrix_rank(gram, tol=1e-10 * max(np.trace(gram), 1e-30)) < 3:
            gram = gram + (1e-9 * np.trace(gram) + 1e-300) * np.eye(3)
            degenerate.append(i)
        t = np.linalg.solve(gram, e0.T @ e1).T
        r, s = _polar_decompose(t)
        logs[i] = rotation_log(r)
        syms[i] = _pack_sym(s)

    # breadth-first consistency pass so adjacent axis-angle vectors agree even
    # past the 180-degree ambiguity
    visited = np.zeros(n, dtype=bool)
    order = [0]
    visited[0] = True
    head = 0
    while head < len(order):
        u = order[head]
        head += 1
        for w in rings[u]:
            if visited[w]:
                continue
            visited[w] = True
            ref = logs[u]
            cands = _axis_angle_candidates(logs[w])
            if np.linalg.norm(logs[w]) < 1e-10 and np.linalg.norm(ref) > np.pi:
                cands.append(2.0 * np.pi * ref / np.linalg.norm(ref))
            logs[w] = min(cands, key=lambda c: np.linalg.norm(c - ref))
            order.append(w)

    center = cur.mean(axis=0)
    return AcapFeature(np.hstack([logs, syms]), center, tuple(degenerate))


def acap_reconstruct(template: Mesh, feature: AcapFeature) -> Mesh:
    """Invert the deformation encoding back to vertex positions.

    Solves the sparse least-squares system matching every one-ring edge to its
    transformed rest edge, with the translation gauge fixed so the vertex mean
    equals feature.center.
    """
    n = template.n_vertices
    if feature.per_vertex.shape[0] != n:
        raise MeshError("acap_reconstruct: feature row count mismatch")
    transforms = np.zeros((n, 3, 3))
    for i in range(n):
        transforms[i] = rotation_exp(feature.per_vertex[i, :3]) @ _unpack_sym(feature.per_vertex[i, 3:])

    rest = template.vertices
    rings = template.one_ring
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, 3))
    for i in range(n):
        ring = rings[i]
        rows.extend([i] * (len(ring) + 1))
        cols.extend(ring.tolist() + [i])
        vals.extend([-1.0] * len(ring) + [float(len(ring))])
        h = 0.5 * np.einsum("kab,kb->ka", transforms[ring] + transforms[i], rest[i] - rest[ring])
        rhs[i] = h.sum(axis=0)
    lap = sp.csr_matrix((vals, (rows, cols)), shape=(n, n)).tolil()
    # pin vertex 0 to remove the translation nullspace (consistent system:
    # any pinned solution is a minimizer, re-centered below)
    lap[0, :] = 0.0
    lap[0, 0] = 1.0
    rhs[0] = 0.0
    try:
        solve = spla.splu(lap.tocsc())
    except RuntimeError as err:
        raise MeshError(f"acap_reconstruct: singular system ({err})") from err
    v = np.column_stack([solve.solve(rhs[:, k]) for k in range(3)])
    if not np.all(np.isfinite(v)):
        raise MeshError("acap_reconstruct: singular system (disconnected mesh?)")
    v += feature.center - v.mean(axis=0)
    return Mesh(v, template.faces)


# -- mesh graph convolution -------------------------------------------------------


def neighbor_mean(x: Tensor, mesh: Mesh) -> Tensor:
    """Differentiable one-ring average of per-vertex features."""
    avg = mesh.neighbor_average()
    avg_t = avg.T.tocsr()

    def backward(g):
        return (avg_t @ g,)

    return Tensor.from_op(avg @ x.data, (x,), backward, "neighbor_mean")


def mesh_graph_conv(x: Tensor, mesh: Mesh, w_self: Tensor, w_neigh: Tensor,
                    bias: Tensor, activation: bool = True) -> Tensor:
    """out_i = leaky_relu(W_self f_i + W_neigh mean_{j in N(i)} f_j + b).

    `activation=False` gives the linear variant used as a regression head.
    """
    if x.data.shape[1] != w_self.data.shape[0]:
        raise T.ShapeError("mesh_graph_conv", x.data.shape, w_self.data.shape)
    out = x @ w_self + neighbor_mean(x, mesh) @ w_neigh + bias
    return T.leaky_relu(out) if activation else out
