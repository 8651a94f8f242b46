"""Triangle mesh container, texture/mask images, normals, and validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class TriangleMesh:
    """Indexed triangle mesh with an optional per-corner UV layer.

    Parameters
    ----------
    vertices : (n, 3) float array
        Vertex positions in scene units.
    faces : (f, 3) int array
        Vertex indices per triangle, counter-clockwise for outward normals.
    uvs : (u, 2) float array, optional
        Pool of texture coordinates in [0, 1]^2.
    uv_indices : (f, 3) int array, optional
        Per-face-corner indices into ``uvs``. Required iff ``uvs`` is given.

    Instances are treated as immutable; all operations return new meshes.
    """

    def __init__(self, vertices, faces, uvs=None, uv_indices=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (n, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (f, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if (uvs is None) != (uv_indices is None):
            raise ValueError("uvs and uv_indices must be given together")
        if uvs is not None:
            self.uvs = np.ascontiguousarray(uvs, dtype=np.float64)
            self.uv_indices = np.ascontiguousarray(uv_indices, dtype=np.int64)
            if self.uvs.ndim != 2 or self.uvs.shape[1] != 2:
                raise ValueError("uvs must be (u, 2)")
            if self.uv_indices.shape != self.faces.shape:
                raise ValueError("uv_indices must match faces shape")
            if self.uv_indices.size and (
                self.uv_indices.min() < 0 or self.uv_indices.max() >= len(self.uvs)
            ):
                raise ValueError("uv index out of range")
        else:
            self.uvs = None
            self.uv_indices = None

    # -- basic queries ---------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def has_uvs(self) -> bool:
        return self.uvs is not None

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (e, 2) int array."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def corner_uvs(self) -> np.ndarray | None:
        """Per-face-corner UVs, shape (f, 3, 2)."""
        if self.uvs is None:
            return None
        return self.uvs[self.uv_indices]

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self.vertices):
            raise ValueError("empty mesh has no bounding box")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def face_areas(self) -> np.ndarray:
        c = self.face_cross()
        return 0.5 * np.linalg.norm(c, axis=1)

    def face_cross(self) -> np.ndarray:
        """Unnormalized face normals (cross products), shape (f, 3)."""
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return np.cross(b - a, c - a)

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        n[n == 0.0] = 1.0
        return c / n

    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def mean_edge_length(self) -> float:
        return float(self.edge_lengths().mean())

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same topology and UVs, new vertex positions."""
        return TriangleMesh(vertices, self.faces, self.uvs, self.uv_indices)

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(
            self.vertices.copy(),
            self.faces.copy(),
            None if self.uvs is None else self.uvs.copy(),
            None if self.uv_indices is None else self.uv_indices.copy(),
        )

    def __repr__(self) -> str:
        uv = f", uvs={len(self.uvs)}" if self.uvs is not None else ""
        return f"TriangleMesh(vertices={self.n_vertices}, faces={self.n_faces}{uv})"


class TextureImage:
    """Square RGB texture with texels in [0, 1], sampled in UV space.

    Texels are stored with row 0 at v=0 (the PNG loader flips the v axis).
    Texel centers sit at ((i + 0.5) / t, (j + 0.5) / t).
    """

    def __init__(self, texels):
        self.texels = np.ascontiguousarray(texels, dtype=np.float64)
        if self.texels.ndim != 3 or self.texels.shape[2] != 3:
            raise ValueError("texels must be (t, t, 3)")
        if self.texels.shape[0] != self.texels.shape[1]:
            raise ValueError("texture must be square")

    @classmethod
    def constant(cls, resolution: int, color=(1.0, 1.0, 1.0)) -> "TextureImage":
        t = np.empty((resolution, resolution, 3), dtype=np.float64)
        t[:] = np.asarray(color, dtype=np.float64)
        return cls(t)

    @property
    def resolution(self) -> int:
        return self.texels.shape[0]

    def copy(self) -> "TextureImage":
        return TextureImage(self.texels.copy())

    def sample_bilinear(self, uv: np.ndarray) -> np.ndarray:
        """Bilinear sample with clamp-to-edge, uv shape (..., 2) -> (..., 3)."""
        val, _ = bilinear_lookup(self.texels, uv)
        return val

    def sample_nearest(self, uv: np.ndarray) -> np.ndarray:
        r, c = nearest_texel(self.resolution, uv)
        return self.texels[r, c]


class MaskImage:
    """Binary UV-space weight map; 1 keeps a texel's pixels in the color loss."""

    def __init__(self, weights):
        w = np.ascontiguousarray(weights, dtype=np.float64)
        if w.ndim == 3:
            w = w[:, :, 0]
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("mask must be (t, t) or (t, t, c), square")
        if not np.isin(w, (0.0, 1.0)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        self.weights = w

    @classmethod
    def ones(cls, resolution: int) -> "MaskImage":
        return cls(np.ones((resolution, resolution), dtype=np.float64))

    @property
    def resolution(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "MaskImage":
        return MaskImage(self.weights.copy())

    def sample_nearest(self, uv: np.ndarray) -> np.ndarray:
        r, c = nearest_texel(self.resolution, uv)
        return self.weights[r, c]


def nearest_texel(resolution: int, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Texel (row, col) containing each uv, clamped to the grid."""
    uv = np.asarray(uv, dtype=np.float64)
    c = np.clip(np.floor(uv[..., 0] * resolution).astype(np.int64), 0, resolution - 1)
    r = np.clip(np.floor(uv[..., 1] * resolution).astype(np.int64), 0, resolution - 1)
    return r, c


def bilinear_lookup(grid: np.ndarray, uv: np.ndarray):
    """Bilinear sample of a (t, t, c) grid at uv in [0, 1]^2, clamp-to-edge.

    Returns (values (..., c), weights) where weights is the tuple
    (r0, c0, fr, fc) needed to scatter gradients back to the four texels.
    """
    t = grid.shape[0]
    uv = np.asarray(uv, dtype=np.float64)
    x = uv[..., 0] * t - 0.5
    y = uv[..., 1] * t - 0.5
    c0 = np.clip(np.floor(x), 0, t - 2).astype(np.int64) if t > 1 else np.zeros(x.shape, np.int64)
    r0 = np.clip(np.floor(y), 0, t - 2).astype(np.int64) if t > 1 else np.zeros(y.shape, np.int64)
    fc = np.clip(x - c0, 0.0, 1.0)
    fr = np.clip(y - r0, 0.0, 1.0)
    if t == 1:
        fc = np.zeros_like(fc)
        fr = np.zeros_like(fr)
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    r1 = np.minimum(r0 + 1, t - 1)
    c1 = np.minimum(c0 + 1, t - 1)
    val = (
        grid[r0, c0] * w00[..., None]
        + grid[r0, c1] * w01[..., None]
        + grid[r1, c0] * w10[..., None]
        + grid[r1, c1] * w11[..., None]
    )
    return val, (r0, c0, fr, fc)


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted vertex normals, unit length, deterministic accumulation.

    Raises if any vertex has a zero accumulated normal (isolated vertex or
    exactly cancelling fan).
    """
    cross = mesh.face_cross()
    acc = np.zeros((mesh.n_vertices, 3), dtype=np.float64)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], cross)
    norms = np.linalg.norm(acc, axis=1)
    bad = np.nonzero(norms <= 1e-300)[0]
    if len(bad):
        raise ValueError(f"vertex {int(bad[0])} has no usable normal (isolated or degenerate fan)")
    return acc / norms[:, None]


@dataclass
class MeshReport:
    """Validation summary produced by :func:`validate`."""

    n_vertices: int
    n_faces: int
    n_edges: int
    euler_characteristic: int
    edge_manifold: bool
    orientable: bool
    closed: bool
    n_boundary_edges: int
    n_degenerate_faces: int
    degenerate_faces: list = field(default_factory=list)
    n_self_intersections: int = 0
    genus: int | None = None

    @property
    def ok(self) -> bool:
        return (
            self.edge_manifold
            and self.orientable
            and self.n_degenerate_faces == 0
            and self.n_self_intersections == 0
        )


def validate(mesh: TriangleMesh, check_self_intersections: bool = True,
             degenerate_area_eps: float = 0.0) -> MeshReport:
    """Check manifoldness, orientability, Euler characteristic, degenerate
    faces, and (optionally) count self-intersecting face pairs.

    Self-intersection counting is exact but quadratic with a sweep prefilter;
    disable it for large meshes.
    """
    f = mesh.faces
    directed = {}
    for idx in range(len(f)):
        a, b, c = int(f[idx, 0]), int(f[idx, 1]), int(f[idx, 2])
        for u, v in ((a, b), (b, c), (c, a)):
            directed[(u, v)] = directed.get((u, v), 0) + 1

    undirected = {}
    for (u, v), n in directed.items():
        key = (u, v) if u < v else (v, u)
        undirected[key] = undirected.get(key, 0) + n

    edge_manifold = all(n <= 2 for n in undirected.values())
    n_boundary = sum(1 for n in undirected.values() if n == 1)
    # Orientable iff no directed edge repeats while its undirected edge is interior.
    orientable = edge_manifold and all(n == 1 for n in directed.values())
    closed = n_boundary == 0

    areas = mesh.face_areas()
    degen = np.nonzero(areas <= degenerate_area_eps)[0]

    n_edges = len(undirected)
    euler = mesh.n_vertices - n_edges + mesh.n_faces
    genus = None
    if closed and edge_manifold and orientable:
        genus = (2 - euler) // 2

    n_self = 0
    if check_self_intersections and mesh.n_faces:
        n_self = count_self_intersections(mesh)

    return MeshReport(
        n_vertices=mesh.n_vertices,
        n_faces=mesh.n_faces,
        n_edges=n_edges,
        euler_characteristic=euler,
        edge_manifold=edge_manifold,
        orientable=orientable,
        closed=closed,
        n_boundary_edges=n_boundary,
        n_degenerate_faces=len(degen),
        degenerate_faces=[int(i) for i in degen[:16]],
        n_self_intersections=n_self,
        genus=genus,
    )


def count_self_intersections(mesh: TriangleMesh) -> int:
    """Number of face pairs that properly intersect (shared-vertex pairs skipped)."""
    v = mesh.vertices
    f = mesh.faces
    tri = v[f]  # (F, 3, 3)
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    order = np.argsort(lo[:, 0], kind="stable")
    count = 0
    for ii in range(len(order)):
        i = order[ii]
        for jj in range(ii + 1, len(order)):
            j = order[jj]
            if lo[j, 0] > hi[i, 0]:
                break
            if lo[j, 1] > hi[i, 1] or hi[j, 1] < lo[i, 1]:
                continue
            if lo[j, 2] > hi[i, 2] or hi[j, 2] < lo[i, 2]:
                continue
            if set(f[i]) & set(f[j]):
                continue
            if _tri_tri_intersect(tri[i], tri[j]):
                count += 1
    return count


def _tri_tri_intersect(t1: np.ndarray, t2: np.ndarray, eps: float = 1e-12) -> bool:
    """Moller interval test for two triangles given as (3, 3) arrays."""
    n1 = np.cross(t1[1] - t1[0], t1[2] - t1[0])
    d2 = t2 @ n1 - t1[0] @ n1
    if (d2 > eps).all() or (d2 < -eps).all():
        return False
    n2 = np.cross(t2[1] - t2[0], t2[2] - t2[0])
    d1 = t1 @ n2 - t2[0] @ n2
    if (d1 > eps).all() or (d1 < -eps).all():
        return False

    direction = np.cross(n1, n2)
    if np.linalg.norm(direction) <= eps * max(np.linalg.norm(n1), np.linalg.norm(n2), 1.0):
        return _coplanar_tri_tri(t1, t2, n1)

    axis = np.argmax(np.abs(direction))
    i1 = _tri_line_interval(t1, d1, axis)
    i2 = _tri_line_interval(t2, d2, axis)
    if i1 is None or i2 is None:
        return False
    return max(i1[0], i2[0]) < min(i1[1], i2[1]) - eps


def _tri_line_interval(t, dist, axis):
    """Projection interval of a triangle on the plane-intersection line."""
    p = t[:, axis]
    pts = []
    for i in range(3):
        for j in range(i + 1, 3):
            di, dj = dist[i], dist[j]
            if di * dj < 0:
                s = di / (di - dj)
                pts.append(p[i] + s * (p[j] - p[i]))
            elif di == 0:
                pts.append(p[i])
    if len(pts) < 2:
        return None
    return min(pts), max(pts)


def _coplanar_tri_tri(t1, t2, n) -> bool:
    """2D overlap test for coplanar triangles, projected along the normal."""
    axis = np.argmax(np.abs(n))
    keep = [i for i in range(3) if i != axis]
    a = t1[:, keep]
    b = t2[:, keep]

    def edges(t):
        return [(t[i], t[(i + 1) % 3]) for i in range(3)]

    def seg_intersect(p1, p2, p3, p4):
        d1 = np.cross(p4 - p3, p1 - p3)
        d2 = np.cross(p4 - p3, p2 - p3)
        d3 = np.cross(p2 - p1, p3 - p1)
        d4 = np.cross(p2 - p1, p4 - p1)
        return (d1 * d2 < 0) and (d3 * d4 < 0)

    for e1 in edges(a):
        for e2 in edges(b):
            if seg_intersect(e1[0], e1[1], e2[0], e2[1]):
                return True

    def inside(p, t):
        s1 = np.cross(t[1] - t[0], p - t[0])
        s2 = np.cross(t[2] - t[1], p - t[1])
        s3 = np.cross(t[0] - t[2], p - t[2])
        return (s1 > 0 and s2 > 0 and s3 > 0) or (s1 < 0 and s2 < 0 and s3 < 0)

    return inside(a[0], b) or inside(b[0], a)
