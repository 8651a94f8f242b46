"""Wavefront OBJ read/write limited to v/vt/f triangle records."""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh


def load_obj(path, require_manifold: bool = True) -> TriangleMesh:
    """Parse an OBJ file into a TriangleMesh.

    Supported records: ``v x y z``, ``vt u v``, and triangular ``f`` with
    either plain vertex indices or ``v/vt`` corners (1-based; a normal slot
    like ``v/vt/vn`` is tolerated and ignored). Faces must use UVs uniformly
    or not at all. Rejects non-triangles, out-of-range or zero indices, and
    (by default) non-edge-manifold connectivity.
    """
    vertices: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[int]] = []
    uv_indices: list[list[int]] = []

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: malformed vertex record")
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif tag == "vt":
                if len(parts) < 3:
                    raise ValueError(f"{path}:{lineno}: malformed vt record")
                uvs.append([float(parts[1]), float(parts[2])])
            elif tag == "f":
                corners = parts[1:]
                if len(corners) != 3:
                    raise ValueError(
                        f"{path}:{lineno}: only triangular faces are supported "
                        f"(got {len(corners)} corners)"
                    )
                vi: list[int] = []
                ti: list[int] = []
                for corner in corners:
                    fields = corner.split("/")
                    vidx = int(fields[0])
                    if vidx == 0:
                        raise ValueError(f"{path}:{lineno}: OBJ indices are 1-based, got 0")
                    if vidx < 0:
                        vidx = len(vertices) + 1 + vidx
                    if not (1 <= vidx <= len(vertices)):
                        raise ValueError(f"{path}:{lineno}: vertex index {fields[0]} out of range")
                    vi.append(vidx - 1)
                    if len(fields) > 1 and fields[1]:
                        tidx = int(fields[1])
                        if tidx == 0:
                            raise ValueError(f"{path}:{lineno}: OBJ indices are 1-based, got 0")
                        if tidx < 0:
                            tidx = len(uvs) + 1 + tidx
                        if not (1 <= tidx <= len(uvs)):
                            raise ValueError(f"{path}:{lineno}: vt index {fields[1]} out of range")
                        ti.append(tidx - 1)
                faces.append(vi)
                if ti:
                    if len(ti) != 3:
                        raise ValueError(f"{path}:{lineno}: face mixes textured and bare corners")
                    uv_indices.append(ti)

    if uv_indices and len(uv_indices) != len(faces):
        raise ValueError(f"{path}: some faces have vt indices and some do not")

    mesh = TriangleMesh(
        np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        np.asarray(uvs, dtype=np.float64).reshape(-1, 2) if uv_indices else None,
        np.asarray(uv_indices, dtype=np.int64).reshape(-1, 3) if uv_indices else None,
    )

    if require_manifold and mesh.n_faces:
        _check_edge_manifold(mesh, path)
    return mesh


def _check_edge_manifold(mesh: TriangleMesh, path) -> None:
    e = np.concatenate(
        [mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]
    )
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    bad = np.nonzero(counts > 2)[0]
    if len(bad):
        u, v = uniq[bad[0]]
        raise ValueError(
            f"{path}: non-manifold topology: edge ({int(u)}, {int(v)}) is shared by "
            f"{int(counts[bad[0]])} faces"
        )


def save_obj(mesh: TriangleMesh, path) -> None:
    """Write v/vt/f records; floats use 9 significant digits."""
    lines: list[str] = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    if mesh.has_uvs:
        for t in mesh.uvs:
            lines.append(f"vt {t[0]:.9g} {t[1]:.9g}")
        for f, t in zip(mesh.faces, mesh.uv_indices):
            lines.append(
                f"f {f[0] + 1}/{t[0] + 1} {f[1] + 1}/{t[1] + 1} {f[2] + 1}/{t[2] + 1}"
            )
    else:
        for f in mesh.faces:
            lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
