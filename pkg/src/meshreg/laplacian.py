"""Cotangent-weight graph Laplacian for triangle meshes."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .mesh import TriangleMesh


def cotangent_laplacian(mesh: TriangleMesh, clamp_negative: bool = True) -> sp.csr_matrix:
    """Sparse symmetric cotangent Laplacian L = D - W.

    Edge weight w_ij = 0.5 * (cot(alpha) + cot(beta)) over the angles opposite
    the edge; negative summed weights are clamped to 0 so L stays positive
    semidefinite. Off-diagonals are -w_ij, the diagonal is the row sum of W,
    hence rows of L sum to zero. Raises on degenerate (zero-area) faces.
    """
    v = mesh.vertices
    f = mesh.faces
    if not len(f):
        raise ValueError("mesh has no faces")

    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    cross = np.cross(p1 - p0, p2 - p0)
    double_area = np.linalg.norm(cross, axis=1)
    degen = np.nonzero(double_area <= 0.0)[0]
    if len(degen):
        raise ValueError(f"face {int(degen[0])} has zero area")

    # cot(angle at corner k) = dot(u, w) / |u x w| for the two edges at k.
    rows = []
    cols = []
    vals = []
    corners = ((0, 1, 2), (1, 2, 0), (2, 0, 1))
    pts = (p0, p1, p2)
    for k, i, j in corners:
        u = pts[i] - pts[k]
        w = pts[j] - pts[k]
        cot = (u * w).sum(axis=1) / double_area
        half = 0.5 * cot
        rows.append(f[:, i])
        cols.append(f[:, j])
        vals.append(half)
        rows.append(f[:, j])
        cols.append(f[:, i])
        vals.append(half)

    n = mesh.n_vertices
    W = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    if clamp_negative:
        W.data = np.maximum(W.data, 0.0)
        W.eliminate_zeros()
    diag = np.asarray(W.sum(axis=1)).ravel()
    L = sp.diags(diag) - W
    return L.tocsr()
