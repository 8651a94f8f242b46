"""Quadric edge-collapse decimation that preserves UV seams."""

from __future__ import annotations

import heapq

import numpy as np

from .mesh import TriangleMesh


def decimate_preserve_uv(mesh: TriangleMesh, target_vertices: int) -> TriangleMesh:
    """Reduce the mesh to ``target_vertices`` by half-edge collapses ordered
    by quadric error.

    Collapses only remove non-seam, non-boundary vertices into a neighbor, so
    UV-seam edges are never collapsed and every surviving corner keeps a UV
    value from the input pool. Collapses that would break the link condition,
    flip a face normal, or flip a UV triangle are rejected. Raises if the
    target cannot be reached, reporting the achievable minimum.
    """
    if not mesh.has_uvs:
        raise ValueError("decimation requires per-corner UVs")
    if target_vertices >= mesh.n_vertices:
        return mesh
    if target_vertices < 4:
        raise ValueError("target must be at least 4 vertices")

    verts = mesh.vertices
    n = mesh.n_vertices

    faces: dict[int, tuple[list, list]] = {
        i: ([int(x) for x in fv], [int(x) for x in fu])
        for i, (fv, fu) in enumerate(zip(mesh.faces, mesh.uv_indices))
    }
    vertex_faces: dict[int, set] = {i: set() for i in range(n)}
    for fid, (fv, _) in faces.items():
        for v in fv:
            vertex_faces[v].add(fid)

    seam = _seam_vertices(mesh)

    quadrics = _face_quadrics(mesh)
    Q = np.zeros((n, 4, 4), dtype=np.float64)
    for fid, (fv, _) in faces.items():
        for v in fv:
            Q[v] += quadrics[fid]

    version = np.zeros(n, dtype=np.int64)
    heap: list = []

    def nbrs(v: int) -> set:
        out = set()
        for fid in vertex_faces[v]:
            out.update(faces[fid][0])
        out.discard(v)
        return out

    def cost_of(a: int, b: int) -> float:
        h = np.array([verts[b, 0], verts[b, 1], verts[b, 2], 1.0])
        return float(h @ (Q[a] + Q[b]) @ h)

    def push_candidates_around(v: int) -> None:
        for x in sorted(nbrs(v)):
            if not seam[x]:
                heapq.heappush(heap, (cost_of(x, v), x, v, int(version[x]), int(version[v])))
            if not seam[v]:
                heapq.heappush(heap, (cost_of(v, x), v, x, int(version[v]), int(version[x])))

    def seed_all() -> None:
        for a in sorted(vertex_faces):
            if seam[a]:
                continue
            for b in sorted(nbrs(a)):
                heapq.heappush(heap, (cost_of(a, b), a, b, int(version[a]), int(version[b])))

    seed_all()
    n_live = n
    reseeded = False

    while n_live > target_vertices:
        if not heap:
            if reseeded:
                break
            seed_all()
            reseeded = True
            if not heap:
                break
            continue
        cost, a, b, va, vb = heapq.heappop(heap)
        if a not in vertex_faces or b not in vertex_faces:
            continue
        if version[a] != va or version[b] != vb:
            continue
        shared = vertex_faces[a] & vertex_faces[b]
        if len(shared) != 2:
            continue
        if nbrs(a) & nbrs(b) != {
            v for fid in shared for v in faces[fid][0] if v not in (a, b)
        }:
            continue  # link condition

        # b's UV index seen from the two collapsing faces must be unique.
        uv_b = {faces[fid][1][faces[fid][0].index(b)] for fid in shared}
        if len(uv_b) != 1:
            continue
        uv_b_star = uv_b.pop()

        wings = vertex_faces[a] - shared
        if not _collapse_is_safe(a, b, wings, faces, verts, mesh.uvs, uv_b_star):
            continue

        for fid in sorted(shared):
            fv, _ = faces.pop(fid)
            for v in fv:
                vertex_faces[v].discard(fid)
        for fid in sorted(wings):
            fv, fu = faces[fid]
            k = fv.index(a)
            fv[k] = b
            fu[k] = uv_b_star
            vertex_faces[b].add(fid)
        del vertex_faces[a]
        Q[b] += Q[a]
        version[b] += 1
        n_live -= 1
        reseeded = False
        push_candidates_around(b)

    if n_live > target_vertices:
        raise ValueError(
            f"cannot decimate to {target_vertices} vertices; "
            f"achievable minimum under seam preservation is {n_live}"
        )

    return _compact(mesh, faces, vertex_faces)


def _seam_vertices(mesh: TriangleMesh) -> np.ndarray:
    """Vertices with more than one UV index among their corners, or on a
    boundary edge. These are never removed."""
    n = mesh.n_vertices
    seam = np.zeros(n, dtype=bool)
    seen: dict[int, int] = {}
    for fv, fu in zip(mesh.faces, mesh.uv_indices):
        for v, t in zip(fv, fu):
            v, t = int(v), int(t)
            prev = seen.get(v)
            if prev is None:
                seen[v] = t
            elif prev != t:
                seam[v] = True

    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    boundary = uniq[counts == 1]
    seam[boundary.ravel()] = True
    return seam


def _face_quadrics(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    a = v[f[:, 0]]
    cr = mesh.face_cross()
    norm = np.linalg.norm(cr, axis=1, keepdims=True)
    norm[norm == 0.0] = 1.0
    nrm = cr / norm
    d = -(nrm * a).sum(axis=1)
    plane = np.concatenate([nrm, d[:, None]], axis=1)  # (f, 4)
    return plane[:, :, None] * plane[:, None, :]


def _collapse_is_safe(a, b, wings, faces, verts, uvs, uv_b_star) -> bool:
    """Reject collapses that flip or degenerate any wing face in 3D or UV."""
    pb = verts[b]
    for fid in wings:
        fv, fu = faces[fid]
        p = [verts[x] for x in fv]
        old = np.cross(p[1] - p[0], p[2] - p[0])
        k = fv.index(a)
        p[k] = pb
        new = np.cross(p[1] - p[0], p[2] - p[0])
        if float(new @ new) <= 0.0 or float(old @ new) <= 0.0:
            return False
        t = [uvs[x] for x in fu]
        o2 = _cross2(t[1] - t[0], t[2] - t[0])
        t[k] = uvs[uv_b_star]
        n2 = _cross2(t[1] - t[0], t[2] - t[0])
        if n2 == 0.0 or (o2 > 0) != (n2 > 0):
            return False
    return True


def _cross2(u, v) -> float:
    return float(u[0] * v[1] - u[1] * v[0])


def _compact(mesh: TriangleMesh, faces, vertex_faces) -> TriangleMesh:
    """Renumber surviving vertices/UVs preserving input order."""
    live_v = sorted(vertex_faces)
    vmap = {old: i for i, old in enumerate(live_v)}
    used_uv = sorted({t for _, fu in faces.values() for t in fu})
    tmap = {old: i for i, old in enumerate(used_uv)}
    out_fv = []
    out_fu = []
    for fid in sorted(faces):
        fv, fu = faces[fid]
        out_fv.append([vmap[x] for x in fv])
        out_fu.append([tmap[x] for x in fu])
    return TriangleMesh(
        mesh.vertices[live_v],
        np.asarray(out_fv, dtype=np.int64),
        mesh.uvs[used_uv],
        np.asarray(out_fu, dtype=np.int64),
    )
