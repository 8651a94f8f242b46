"""Deterministic software rasterizer with analytic derivatives.

Forward passes produce hard (unblended) color, depth, normal, and mask
images from a z-buffered fragment pass.  A separate silhouette pass finds
pixel pairs straddling an occlusion boundary and produces blend records —
the 1-pixel anti-aliasing band that makes coverage changes differentiable.
The backward pass chains pixel gradients through barycentric
interpolation, perspective projection, texture sampling, vertex normals,
and spherical-harmonic shading back to vertex positions and texels, and
chains blend factors to the silhouette edge endpoints.

Everything is plain numpy, single-threaded and deterministic: candidate
fragments are generated in face order, resolved with a stable lexsort,
and gradients are scattered with np.add.at in fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, SHLighting
from .mesh import (MaskImage, TextureImage, TriangleMesh, bilinear_lookup,
                   nearest_texel, vertex_normals)

__all__ = [
    "FrameBufferSet", "AaRecords",
    "rasterize", "shade_color", "render_depth", "render_normal",
    "render_mask", "silhouette_records", "record_values", "apply_aa",
    "blend_image", "backward",
]

# Degenerate-screen-triangle cutoff for gradient chains (pixels^2).
_AREA_EPS = 1e-12


def _cross2(ax, ay, bx, by):
    return ax * by - ay * bx


@dataclass
class FrameBufferSet:
    """Raster output plus the intermediates the backward pass needs.

    Per-pixel buffers are (h, w) row-major, row 0 at the top.  Background
    pixels carry tri_id -1, depth = background_depth, and zero
    barycentrics.  ``bary`` holds the first two perspective-correct
    barycentric coordinates of the *original* triangle (near-plane
    clipping introduces sub-triangles, but their fragments interpolate
    original-corner attributes, so stored coordinates always refer to the
    face in ``tri_id``).
    """

    image_size: tuple[int, int]
    coverage: np.ndarray
    tri_id: np.ndarray
    bary: np.ndarray
    depth: np.ndarray
    clip: np.ndarray                 # (n,4) vertex clip coords, retained
    clipped_faces: np.ndarray        # (m,) bool: face crossed the near plane
    background_color: np.ndarray
    background_depth: float
    _covered: tuple | None = field(default=None, repr=False)

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def covered(self) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) of covered pixels, row-major order, cached."""
        if self._covered is None:
            self._covered = np.nonzero(self.coverage)
        return self._covered

    def full_bary(self) -> np.ndarray:
        """(P,3) barycentrics at covered pixels."""
        rows, cols = self.covered()
        b = self.bary[rows, cols]
        return np.concatenate([b, 1.0 - b.sum(axis=1, keepdims=True)], axis=1)

    def interpolate(self, corner_values: np.ndarray) -> np.ndarray:
        """Interpolate per-corner attributes (m,3,k) at covered pixels -> (P,k)."""
        rows, cols = self.covered()
        tri = self.tri_id[rows, cols]
        b = self.full_bary()
        return np.einsum("pk,pkj->pj", b, corner_values[tri])

    def pixel_uv(self, mesh: TriangleMesh) -> np.ndarray:
        """UV coordinates at covered pixels -> (P,2)."""
        cuv = mesh.corner_uvs
        if cuv is None:
            raise ValueError("mesh has no UV parametrization")
        return self.interpolate(cuv)


def _project_vertices(mesh: TriangleMesh, cam: Camera) -> np.ndarray:
    # Broadcast sum instead of matmul keeps the reduction order fixed
    # regardless of BLAS threading.
    v = mesh.vertices
    p = cam.projection
    return (v[:, 0:1] * p[:, 0] + v[:, 1:2] * p[:, 1]
            + v[:, 2:3] * p[:, 2] + p[:, 3])


def _screen_from_clip(clip: np.ndarray, w_img: int, h_img: int,
                      w_safe_eps: float = 0.0) -> np.ndarray:
    w = clip[..., 3]
    if w_safe_eps:
        w = np.where(np.abs(w) < w_safe_eps,
                     np.where(w < 0, -w_safe_eps, w_safe_eps), w)
    x = (clip[..., 0] / w * 0.5 + 0.5) * w_img
    y = (0.5 - clip[..., 1] / w * 0.5) * h_img
    return np.stack([x, y], axis=-1)


def _near_clip_triangles(clip: np.ndarray, faces: np.ndarray, near: float):
    """Clip faces against w = near.

    Returns (tri_clip (M,3,4), tri_bary (M,3,3), tri_orig (M,), clipped_mask
    (m,)) where tri_bary holds each raster corner's barycentric weights with
    respect to its original face.  Weights are linear in clip space, so
    sub-triangle fragments interpolate original attributes exactly.
    """
    m = faces.shape[0]
    w = clip[faces][:, :, 3]
    front = w >= near
    n_front = front.sum(axis=1)
    clipped_mask = (n_front > 0) & (n_front < 3)

    direct = np.nonzero(n_front == 3)[0]
    eye3 = np.eye(3, dtype=np.float64)
    out_clip = [clip[faces[direct]]]
    out_bary = [np.broadcast_to(eye3, (len(direct), 3, 3))]
    out_orig = [direct]

    for fid in np.nonzero(clipped_mask)[0]:
        corners = clip[faces[fid]]
        poly_c, poly_b = [], []
        for k in range(3):
            a, b = corners[k], corners[(k + 1) % 3]
            ba, bb = eye3[k], eye3[(k + 1) % 3]
            ina, inb = a[3] >= near, b[3] >= near
            if ina:
                poly_c.append(a)
                poly_b.append(ba)
            if ina != inb:
                t = (near - a[3]) / (b[3] - a[3])
                poly_c.append(a + t * (b - a))
                poly_b.append(ba + t * (bb - ba))
        for k in range(1, len(poly_c) - 1):
            out_clip.append(np.stack([poly_c[0], poly_c[k], poly_c[k + 1]])[None])
            out_bary.append(np.stack([poly_b[0], poly_b[k], poly_b[k + 1]])[None])
            out_orig.append(np.array([fid], dtype=np.int64))

    tri_clip = np.concatenate(out_clip) if out_clip else np.zeros((0, 3, 4))
    tri_bary = np.concatenate(out_bary) if out_bary else np.zeros((0, 3, 3))
    tri_orig = (np.concatenate(out_orig).astype(np.int64)
                if out_orig else np.zeros(0, np.int64))
    return tri_clip, tri_bary, tri_orig, clipped_mask


def rasterize(mesh: TriangleMesh, cam: Camera,
              background_color=(0.0, 0.0, 0.0)) -> FrameBufferSet:
    """Z-buffered rasterization at pixel centers (i+0.5, j+0.5).

    Back-face culling is off; both winding orders rasterize.  Ties at
    exactly equal depth go to the lower original face id.
    """
    w_img, h_img = cam.image_size
    clip = _project_vertices(mesh, cam)
    coverage = np.zeros((h_img, w_img), dtype=bool)
    tri_id = np.full((h_img, w_img), -1, dtype=np.int64)
    bary = np.zeros((h_img, w_img, 2), dtype=np.float64)
    depth = np.full((h_img, w_img), cam.far, dtype=np.float64)
    bg = np.asarray(background_color, dtype=np.float64)
    fb = FrameBufferSet((w_img, h_img), coverage, tri_id, bary, depth, clip,
                        np.zeros(mesh.n_faces, dtype=bool), bg, cam.far)
    if mesh.n_faces == 0:
        return fb

    tri_clip, tri_bary, tri_orig, clipped_mask = _near_clip_triangles(
        clip, mesh.faces, cam.near)
    fb.clipped_faces = clipped_mask
    if len(tri_orig) == 0:
        return fb

    screen = _screen_from_clip(tri_clip, w_img, h_img)   # (M,3,2), w >= near

    # Integer pixel ranges whose centers fall inside each screen bbox.
    ix0 = np.maximum(np.ceil(screen[:, :, 0].min(axis=1) - 0.5), 0).astype(np.int64)
    ix1 = np.minimum(np.floor(screen[:, :, 0].max(axis=1) - 0.5), w_img - 1).astype(np.int64)
    iy0 = np.maximum(np.ceil(screen[:, :, 1].min(axis=1) - 0.5), 0).astype(np.int64)
    iy1 = np.minimum(np.floor(screen[:, :, 1].max(axis=1) - 0.5), h_img - 1).astype(np.int64)
    keep = (ix1 >= ix0) & (iy1 >= iy0)
    if not keep.any():
        return fb
    tri_clip, tri_bary, tri_orig, screen = (tri_clip[keep], tri_bary[keep],
                                            tri_orig[keep], screen[keep])
    ix0, ix1, iy0, iy1 = ix0[keep], ix1[keep], iy0[keep], iy1[keep]

    widths = ix1 - ix0 + 1
    counts = widths * (iy1 - iy0 + 1)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    tri_of = np.repeat(np.arange(len(counts)), counts)
    local = np.arange(total) - offsets[tri_of]
    wrep = widths[tri_of]
    px_i = ix0[tri_of] + local % wrep
    px_j = iy0[tri_of] + local // wrep
    px = px_i + 0.5
    py = px_j + 0.5

    s = screen[tri_of]                                   # (K,3,2)
    e = np.empty((total, 3), dtype=np.float64)
    for k in range(3):
        a = s[:, (k + 1) % 3]
        b = s[:, (k + 2) % 3]
        e[:, k] = _cross2(b[:, 0] - a[:, 0], b[:, 1] - a[:, 1],
                          px - a[:, 0], py - a[:, 1])
    area = e.sum(axis=1)
    inside = (((e >= 0).all(axis=1) | (e <= 0).all(axis=1))
              & (np.abs(area) > 0))
    if not inside.any():
        return fb

    e = e[inside]
    area = area[inside]
    tri_of = tri_of[inside]
    px_i, px_j = px_i[inside], px_j[inside]

    beta = e / area[:, None]
    wk = tri_clip[tri_of, :, 3]
    q = beta / wk
    denom = q.sum(axis=1)
    frag_depth = 1.0 / denom
    b_orig = np.einsum("pk,pkj->pj", q, tri_bary[tri_of]) * frag_depth[:, None]

    pix = px_j * w_img + px_i
    okey = tri_orig[tri_of]
    order = np.lexsort((okey, frag_depth, pix))
    pix_sorted = pix[order]
    first = np.empty(len(order), dtype=bool)
    first[0] = True
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    rows, cols = px_j[win], px_i[win]
    coverage[rows, cols] = True
    tri_id[rows, cols] = okey[win]
    depth[rows, cols] = frag_depth[win]
    b = np.clip(b_orig[win][:, :2], 0.0, 1.0)
    over = b.sum(axis=1)
    np.divide(b, over[:, None], out=b, where=(over > 1.0)[:, None])
    bary[rows, cols] = b
    return fb


def shade_color(fb: FrameBufferSet, mesh: TriangleMesh, light: SHLighting,
                albedo: TextureImage) -> np.ndarray:
    """Lambertian color image: bilinear albedo times SH irradiance at the
    interpolated unit normal.  Background pixels take the background color."""
    if not mesh.has_uvs:
        raise ValueError("mesh has no UV parametrization")
    h, w = fb.height, fb.width
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = fb.background_color
    rows, cols = fb.covered()
    if len(rows) == 0:
        return img
    uv = fb.pixel_uv(mesh)
    vn = vertex_normals(mesh)
    nraw = fb.interpolate(vn[mesh.faces])
    nhat = nraw / np.linalg.norm(nraw, axis=1, keepdims=True)
    img[rows, cols] = albedo.sample_bilinear(uv) * light.irradiance(nhat)
    return img


def render_depth(fb: FrameBufferSet, mesh: TriangleMesh | None = None) -> np.ndarray:
    """Camera-space depth in scene units; background = far plane."""
    return fb.depth.copy()


def render_normal(fb: FrameBufferSet, mesh: TriangleMesh) -> np.ndarray:
    """Interpolated unit vertex normals in world space; background = 0."""
    h, w = fb.height, fb.width
    img = np.zeros((h, w, 3), dtype=np.float64)
    rows, cols = fb.covered()
    if len(rows) == 0:
        return img
    vn = vertex_normals(mesh)
    nraw = fb.interpolate(vn[mesh.faces])
    img[rows, cols] = nraw / np.linalg.norm(nraw, axis=1, keepdims=True)
    return img


def render_mask(fb: FrameBufferSet, mesh: TriangleMesh,
                mask: MaskImage) -> np.ndarray:
    """Nearest-texel mask lookup per covered pixel; background = 1."""
    h, w = fb.height, fb.width
    img = np.ones((h, w), dtype=np.float64)
    rows, cols = fb.covered()
    if len(rows) == 0:
        return img
    img[rows, cols] = mask.sample_nearest(fb.pixel_uv(mesh))
    return img


@dataclass
class SubSegs:
    """Strip subsegments behind a record's final crossing.

    When the silhouette walk steps across internal edges on its way to
    the surface's end, each crossed face contributes one row: the face
    sampled at its exit crossing (``s`` along the pair segment, with
    ``prev`` the crossing before it).  Faces behind the inside center,
    found by the backward pass of the walk, contribute rows the same
    way, sampled where the segment's line enters them.  The record's
    blended value averages these samples over the one-pixel strip ending
    at the final crossing, weighted by each subsegment's overlap with
    the strip, so a face shrinking to a sliver fades out of the blend
    instead of snapping it when the face turns edge-on.  ``rec`` indexes
    the parent record row.
    """

    rec: np.ndarray
    tri: np.ndarray
    s: np.ndarray
    prev: np.ndarray
    bary: np.ndarray
    depth: np.ndarray
    px: np.ndarray
    py: np.ndarray
    valid: np.ndarray
    edge_a: np.ndarray
    edge_b: np.ndarray
    d_s_a: np.ndarray
    d_s_b: np.ndarray

    _FIELDS = ("rec", "tri", "s", "prev", "bary", "depth", "px", "py",
               "valid", "edge_a", "edge_b", "d_s_a", "d_s_b")

    def __len__(self) -> int:
        return len(self.s)

    @classmethod
    def empty(cls) -> "SubSegs":
        z = np.zeros(0, dtype=np.int64)
        f = np.zeros(0, dtype=np.float64)
        f2 = np.zeros((0, 2), dtype=np.float64)
        f3 = np.zeros((0, 3), dtype=np.float64)
        return cls(z, z.copy(), f, f.copy(), f3, f.copy(), f.copy(),
                   f.copy(), np.zeros(0, dtype=bool), z.copy(), z.copy(),
                   f2, f2.copy())


@dataclass
class AaRecords:
    """Silhouette blend records: blended[dst] += alpha * (value - hard[dst]).

    Two records per neighboring pixel pair straddling an occlusion
    boundary, one blending each pixel of the pair.  ``alpha`` in [0, 0.5]
    is linear in where the boundary crosses the center-to-center segment
    (``s`` = crossing position, ``slope`` = d alpha / d s).  The
    blended-in value is not the neighboring pixel's sample but the source
    surface evaluated at the crossing point itself: ``tri`` holds that
    surface's face (-1 for background), ``bary``/``depth`` its
    perspective-correct coordinates at the crossing, and (px, py) the
    crossing with (dpx, dpy) = d(px,py)/ds.  Evaluating at the crossing
    keeps the blended image continuous through pixel-coverage flips, pair
    handoffs, and silhouette-corner transitions, because at each such
    event the two expressions meeting there interpolate the same surface
    at the same point.  Records on the uncovered side of the pair further
    average the final sample with the ``subs`` subsegments over a
    one-pixel strip (``s_prev`` = the crossing before the final one:
    the walk's last hop, or where the line enters the start face when
    the walk never hopped), which keeps the value continuous when a
    face of the surface turns edge-on and the silhouette hops between
    its edges.  Records whose face cannot be
    evaluated (``valid`` false) fall back to copying the src pixel.
    d_s_a / d_s_b are ds/d(screen position) of the crossing edge's
    endpoint vertices edge_a / edge_b.
    """

    dst: np.ndarray
    src: np.ndarray
    alpha: np.ndarray
    slope: np.ndarray
    tri: np.ndarray
    bary: np.ndarray
    depth: np.ndarray
    px: np.ndarray
    py: np.ndarray
    dpx: np.ndarray
    dpy: np.ndarray
    edge_a: np.ndarray
    edge_b: np.ndarray
    d_s_a: np.ndarray
    d_s_b: np.ndarray
    valid: np.ndarray
    s: np.ndarray
    s_prev: np.ndarray
    subs: SubSegs

    _FIELDS = ("dst", "src", "alpha", "slope", "tri", "bary", "depth",
               "px", "py", "dpx", "dpy", "edge_a", "edge_b", "d_s_a",
               "d_s_b", "valid", "s", "s_prev")

    def __len__(self) -> int:
        return len(self.alpha)

    def subset(self, keep: np.ndarray) -> "AaRecords":
        remap = np.cumsum(keep) - 1
        sk = keep[self.subs.rec]
        subs = SubSegs(*(getattr(self.subs, f)[sk] for f in SubSegs._FIELDS))
        subs.rec = remap[subs.rec]
        return AaRecords(*(getattr(self, f)[keep] for f in self._FIELDS),
                         subs=subs)

    @classmethod
    def empty(cls) -> "AaRecords":
        z = np.zeros(0, dtype=np.int64)
        f = np.zeros(0, dtype=np.float64)
        f2 = np.zeros((0, 2), dtype=np.float64)
        f3 = np.zeros((0, 3), dtype=np.float64)
        return cls(z, z.copy(), f, f.copy(), z.copy(), f3, f.copy(),
                   f.copy(), f.copy(), f.copy(), f.copy(), z.copy(),
                   z.copy(), f2, f2.copy(), np.zeros(0, dtype=bool),
                   f.copy(), f.copy(), SubSegs.empty())


def _edge_neighbors(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    """(f, 3) face index across edge k of each face, -1 when the edge is a
    boundary or non-manifold.  Edge k joins corners k and (k+1)%3."""
    ek = np.stack([faces[:, (0, 1)], faces[:, (1, 2)], faces[:, (2, 0)]],
                  axis=1)
    key = (ek.min(axis=2).astype(np.int64) * n_vertices
           + ek.max(axis=2)).reshape(-1)
    uniq, inv, cnt = np.unique(key, return_inverse=True, return_counts=True)
    order = np.argsort(inv, kind="stable")
    starts = np.cumsum(cnt) - cnt
    neighbor = np.full((len(faces), 3), -1, dtype=np.int64)
    two = starts[cnt == 2]
    a, b = order[two], order[two + 1]
    fa, ka = np.divmod(a, 3)
    fb_, kb = np.divmod(b, 3)
    neighbor[fa, ka] = fb_
    neighbor[fb_, kb] = fa
    return neighbor


def _extrapolate_at(fb: FrameBufferSet, mesh: TriangleMesh, tri: np.ndarray,
                    px: np.ndarray, py: np.ndarray):
    """Perspective-correct barycentrics of faces at given screen points.

    The point need not lie inside the face; the face's attribute plane is
    extended past its edges.  Returns (bary (n,3), depth (n,), ok (n,));
    ok is False for background rows (tri < 0) and for rows whose face has
    no usable plane there (near-clipped, screen-degenerate, or a point on
    the far side of the horizon where the interpolated depth turns
    negative).
    """
    n = len(tri)
    bary = np.zeros((n, 3), dtype=np.float64)
    depth = np.zeros(n, dtype=np.float64)
    ok = np.zeros(n, dtype=bool)
    sel = tri >= 0
    if not sel.any():
        return bary, depth, ok
    t = tri[sel]
    clipc = fb.clip[mesh.faces[t]]
    w_img, h_img = fb.image_size
    s = _screen_from_clip(clipc, w_img, h_img)
    e = np.empty((len(t), 3), dtype=np.float64)
    for k in range(3):
        a = s[:, (k + 1) % 3]
        bb = s[:, (k + 2) % 3]
        e[:, k] = _cross2(bb[:, 0] - a[:, 0], bb[:, 1] - a[:, 1],
                          px[sel] - a[:, 0], py[sel] - a[:, 1])
    area = e.sum(axis=1)
    good = (np.abs(area) > _AREA_EPS) & ~fb.clipped_faces[t]
    area_safe = np.where(np.abs(area) > _AREA_EPS, area, 1.0)
    beta = e / area_safe[:, None]
    wk = clipc[:, :, 3]
    good &= wk.min(axis=1) > 1e-9
    q = beta / np.maximum(wk, 1e-9)
    den = q.sum(axis=1)
    good &= den > 1e-12
    fd = 1.0 / np.where(den > 1e-12, den, 1.0)
    bary[sel] = q * fd[:, None]
    depth[sel] = fd
    ok[sel] = good
    return bary, depth, ok


def silhouette_records(fb: FrameBufferSet, mesh: TriangleMesh,
                       cam: Camera) -> AaRecords:
    """Find 4-neighbor pixel pairs across coverage/id discontinuities.

    The nearer (or the only covered) pixel is the inside of the
    silhouette.  The blend edge is found by walking the surface along the
    center-to-center segment: crossings of internal edges whose far face
    keeps the same screen orientation are surface-interior, so the search
    continues on the neighbor face until the surface genuinely ends — a
    boundary edge, an orientation flip, or a degenerate / near-clipped
    far face.  Same-facing edge-adjacent covered pairs are interior id
    changes and never blend; pairs whose inside face was near-clipped or
    is screen-degenerate are skipped.
    """
    tid = fb.tri_id
    dep = fb.depth
    w_img, h_img = fb.image_size

    pair_a, pair_b = [], []
    hm = tid[:, :-1] != tid[:, 1:]
    r, c = np.nonzero(hm)
    pair_a.append(r * w_img + c)
    pair_b.append(r * w_img + c + 1)
    vm = tid[:-1, :] != tid[1:, :]
    r, c = np.nonzero(vm)
    pair_a.append(r * w_img + c)
    pair_b.append((r + 1) * w_img + c)
    pa = np.concatenate(pair_a)
    pb = np.concatenate(pair_b)
    if len(pa) == 0:
        return AaRecords.empty()

    tid_f = tid.reshape(-1)
    dep_f = dep.reshape(-1)
    ta, tb = tid_f[pa], tid_f[pb]
    da, db = dep_f[pa], dep_f[pb]

    # Inside = the covered side, else the nearer side, else the lower id.
    a_in = np.where(ta < 0, False,
                    np.where(tb < 0, True,
                             np.where(da != db, da < db, ta < tb)))
    t_in = np.where(a_in, ta, tb)
    p_in = np.where(a_in, pa, pb)
    p_out = np.where(a_in, pb, pa)
    t_out = np.where(a_in, tb, ta)

    # Screen orientation sign per face; 0 marks screen-degenerate faces.
    s_faces = _screen_from_clip(fb.clip[mesh.faces], w_img, h_img)
    ar2 = _cross2(s_faces[:, 1, 0] - s_faces[:, 0, 0],
                  s_faces[:, 1, 1] - s_faces[:, 0, 1],
                  s_faces[:, 2, 0] - s_faces[:, 0, 0],
                  s_faces[:, 2, 1] - s_faces[:, 0, 1])
    fsign = np.where(ar2 > _AREA_EPS, 1, np.where(ar2 < -_AREA_EPS, -1, 0))
    neighbor = _edge_neighbors(mesh.faces, mesh.n_vertices)

    keep = ~fb.clipped_faces[t_in] & (fsign[t_in] != 0)
    # Same-facing faces across a shared mesh edge: interior id change.
    both = (ta >= 0) & (tb >= 0)
    if both.any():
        fa = mesh.faces[np.where(t_in >= 0, t_in, 0)]
        fo = mesh.faces[np.where(t_out >= 0, t_out, 0)]
        common = (fa[:, :, None] == fo[:, None, :]).any(axis=2).sum(axis=1)
        same_facing = fsign[np.where(t_in >= 0, t_in, 0)] \
            * fsign[np.where(t_out >= 0, t_out, 0)] > 0
        keep &= ~(both & (common >= 2) & same_facing)
    if not keep.any():
        return AaRecords.empty()
    t_in, p_in, p_out = t_in[keep], p_in[keep], p_out[keep]

    cx_in = (p_in % w_img) + 0.5
    cy_in = (p_in // w_img) + 0.5
    cx_out = (p_out % w_img) + 0.5
    cy_out = (p_out // w_img) + 0.5

    # Walk the surface along the segment until it ends.  Each hop finds
    # the first edge crossing past the previous one; same-facing internal
    # crossings continue on the far face.
    n_rec = len(t_in)
    cur = t_in.copy()
    s_prev = np.full(n_rec, -1.0)
    # Edge we stepped through last hop, as a sorted-pair key; it must not
    # be re-crossed (its s recomputed on the far face can land an ulp past
    # s_prev and bounce the walk back).
    prev_key = np.full(n_rec, -1, dtype=np.int64)
    fin_tri = np.full(n_rec, -1, dtype=np.int64)
    fin_edge = np.zeros(n_rec, dtype=np.int64)
    fin_s = np.zeros(n_rec)
    fin_ein = np.zeros(n_rec)
    fin_eout = np.zeros(n_rec)
    active = np.ones(n_rec, dtype=bool)
    hopped = np.zeros(n_rec, dtype=bool)
    hops: list = []
    for _ in range(24):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        tri = cur[idx]
        crn = mesh.faces[tri]
        s = _screen_from_clip(fb.clip[crn], w_img, h_img)
        e_in = np.empty((len(idx), 3))
        e_out = np.empty((len(idx), 3))
        keys = np.empty((len(idx), 3), dtype=np.int64)
        for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
            ax, ay = s[:, i, 0], s[:, i, 1]
            bx, by = s[:, j, 0], s[:, j, 1]
            e_in[:, k] = _cross2(bx - ax, by - ay,
                                 cx_in[idx] - ax, cy_in[idx] - ay)
            e_out[:, k] = _cross2(bx - ax, by - ay,
                                  cx_out[idx] - ax, cy_out[idx] - ay)
            va, vb = crn[:, k], crn[:, (k + 1) % 3]
            keys[:, k] = (np.minimum(va, vb).astype(np.int64)
                          * mesh.n_vertices + np.maximum(va, vb))
        crossing = ((e_in > 0) & (e_out < 0)) | ((e_in < 0) & (e_out > 0))
        crossing &= keys != prev_key[idx][:, None]
        delta = e_in - e_out
        with np.errstate(divide="ignore", invalid="ignore"):
            s_cand = np.where(crossing, e_in / delta, np.inf)
        s_cand = np.where(s_cand >= s_prev[idx][:, None] - 1e-9,
                          s_cand, np.inf)
        kk = np.argmin(s_cand, axis=1)
        rr = np.arange(len(idx))
        sc = s_cand[rr, kk]
        has = np.isfinite(sc)
        nb = np.where(has, neighbor[tri, kk], -1)
        same = has & (nb >= 0) & (fsign[tri] * fsign[np.maximum(nb, 0)] > 0)
        step = same & ~fb.clipped_faces[np.maximum(nb, 0)]
        settle = has & ~same
        sl = idx[settle]
        fin_tri[sl] = tri[settle]
        fin_edge[sl] = kk[settle]
        fin_s[sl] = sc[settle]
        fin_ein[sl] = e_in[rr[settle], kk[settle]]
        fin_eout[sl] = e_out[rr[settle], kk[settle]]
        active[idx[~step]] = False
        if step.any():
            st = rr[step]
            hops.append((idx[step], tri[step], kk[step], sc[step],
                         s_prev[idx[step]].copy(),
                         e_in[st, kk[step]], e_out[st, kk[step]],
                         crn[st, kk[step]], crn[st, (kk[step] + 1) % 3]))
        cur[idx[step]] = nb[step]
        s_prev[idx[step]] = sc[step]
        prev_key[idx[step]] = keys[rr[step], kk[step]]
        hopped[idx[step]] = True

    ok = fin_tri >= 0
    if not ok.any():
        return AaRecords.empty()

    # Second pass: walk backward from the start face to fill the strip
    # portion behind the inside center.  A record whose crossing sits
    # near that center (s* -> 0) takes almost all of its strip from this
    # side, and the fill must sample the same faces the opposite pair's
    # forward walk sees once coverage flips, or blended values jump at
    # the flip.  Candidate crossings are line crossings at s below the
    # current bound (the sign test used forward only sees s in (0, 1));
    # from strictly inside a face the nearest line crossing either way
    # is a true boundary crossing, so argmax mirrors forward's argmin.
    # The pass stops once the strip floor s*-1 is reached, and when the
    # surface ends first (boundary, flip, degenerate) the deepest face
    # entered keeps a sentinel lower bound and spans the rest.
    lo_all = fin_s - 1.0
    bcur = t_in.copy()
    b_hi = np.zeros(n_rec)
    bkey = np.full(n_rec, -1, dtype=np.int64)
    e0 = np.full(n_rec, -1.5)
    p_tri = np.full(n_rec, -1, dtype=np.int64)
    p_s = np.zeros(n_rec)
    p_ein = np.zeros(n_rec)
    p_eout = np.zeros(n_rec)
    p_ca = np.zeros(n_rec, dtype=np.int64)
    p_cb = np.zeros(n_rec, dtype=np.int64)
    bhops: list = []
    bactive = ok.copy()
    for _ in range(24):
        idx = np.nonzero(bactive)[0]
        if len(idx) == 0:
            break
        tri = bcur[idx]
        crn = mesh.faces[tri]
        s = _screen_from_clip(fb.clip[crn], w_img, h_img)
        e_in = np.empty((len(idx), 3))
        e_out = np.empty((len(idx), 3))
        keys = np.empty((len(idx), 3), dtype=np.int64)
        for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
            ax, ay = s[:, i, 0], s[:, i, 1]
            bx, by = s[:, j, 0], s[:, j, 1]
            e_in[:, k] = _cross2(bx - ax, by - ay,
                                 cx_in[idx] - ax, cy_in[idx] - ay)
            e_out[:, k] = _cross2(bx - ax, by - ay,
                                  cx_out[idx] - ax, cy_out[idx] - ay)
            va, vb = crn[:, k], crn[:, (k + 1) % 3]
            keys[:, k] = (np.minimum(va, vb).astype(np.int64)
                          * mesh.n_vertices + np.maximum(va, vb))
        delta = e_in - e_out
        with np.errstate(divide="ignore", invalid="ignore"):
            s_cand = np.where(delta != 0.0, e_in / delta, -np.inf)
        s_cand = np.where(np.isfinite(s_cand), s_cand, -np.inf)
        s_cand = np.where(keys != bkey[idx][:, None], s_cand, -np.inf)
        s_cand = np.where(s_cand < b_hi[idx][:, None] - 1e-9,
                          s_cand, -np.inf)
        kk = np.argmax(s_cand, axis=1)
        rr = np.arange(len(idx))
        sc = s_cand[rr, kk]
        has = np.isfinite(sc)
        reached = has & (sc <= lo_all[idx])
        nb = np.where(has, neighbor[tri, kk], -1)
        same = (has & ~reached & (nb >= 0)
                & (fsign[tri] * fsign[np.maximum(nb, 0)] > 0))
        step = same & ~fb.clipped_faces[np.maximum(nb, 0)]
        close = np.where(step | reached, sc, -1.5)
        hp = p_tri[idx] >= 0
        if hp.any():
            hi = idx[hp]
            bhops.append((hi, p_tri[hi].copy(),
                          np.zeros(int(hp.sum()), dtype=np.int64),
                          p_s[hi].copy(), close[hp], p_ein[hi].copy(),
                          p_eout[hi].copy(), p_ca[hi].copy(),
                          p_cb[hi].copy()))
        e0[idx[~hp]] = close[~hp]
        if step.any():
            st = rr[step]
            si = idx[step]
            p_tri[si] = nb[step]
            p_s[si] = sc[step]
            p_ein[si] = e_in[st, kk[step]]
            p_eout[si] = e_out[st, kk[step]]
            p_ca[si] = crn[st, kk[step]]
            p_cb[si] = crn[st, (kk[step] + 1) % 3]
            bcur[si] = nb[step]
            b_hi[si] = sc[step]
            bkey[si] = keys[st, kk[step]]
        bactive[idx[~step]] = False
    left = bactive & (p_tri >= 0)
    if left.any():
        li = np.nonzero(left)[0]
        bhops.append((li, p_tri[li], np.zeros(len(li), dtype=np.int64),
                      p_s[li], np.full(len(li), -1.5), p_ein[li],
                      p_eout[li], p_ca[li], p_cb[li]))
    cx_in_all, cy_in_all = cx_in, cy_in
    cx_out_all, cy_out_all = cx_out, cy_out
    fin_s_all = fin_s
    t_rec = fin_tri[ok]
    p_in, p_out = p_in[ok], p_out[ok]
    edge_k, s_star = fin_edge[ok], fin_s[ok]
    ein, eout = fin_ein[ok], fin_eout[ok]
    sprev_out = np.where(hopped, s_prev, e0)[ok]
    cx_in, cy_in, cx_out, cy_out = cx_in[ok], cy_in[ok], cx_out[ok], cy_out[ok]
    corners = mesh.faces[t_rec]
    s = _screen_from_clip(fb.clip[corners], w_img, h_img)
    rng = np.arange(len(t_rec))

    edge_ij = np.array(((0, 1), (1, 2), (2, 0)), dtype=np.int64)
    ii = edge_ij[edge_k, 0]
    jj = edge_ij[edge_k, 1]
    sa = s[rng, ii]
    sb = s[rng, jj]
    dlt = ein - eout

    ds_dein = -eout / dlt**2
    ds_deout = ein / dlt**2
    # de/dA = (B.y - p.y, p.x - B.x); de/dB = (p.y - A.y, A.x - p.x)
    dein_da = np.stack([sb[:, 1] - cy_in, cx_in - sb[:, 0]], axis=1)
    deout_da = np.stack([sb[:, 1] - cy_out, cx_out - sb[:, 0]], axis=1)
    dein_db = np.stack([cy_in - sa[:, 1], sa[:, 0] - cx_in], axis=1)
    deout_db = np.stack([cy_out - sa[:, 1], sa[:, 0] - cx_out], axis=1)
    ds_a = ds_dein[:, None] * dein_da + ds_deout[:, None] * deout_da
    ds_b = ds_dein[:, None] * dein_db + ds_deout[:, None] * deout_db

    # Triangle-filter blend: the crossing at s* transfers 0.5*s* of the
    # inside value onto the outside pixel and 0.5*(1-s*) of the outside
    # value onto the inside pixel, each weight linear over the record's
    # whole life.  The blended values come from the source surfaces
    # sampled at the crossing point itself: the walk face for the outside
    # half, and whatever lies beyond the inside pixel (the outside
    # neighbor's face, or the background) for the inside half.
    pxc = cx_in + s_star * (cx_out - cx_in)
    pyc = cy_in + s_star * (cy_out - cy_in)
    dpx = cx_out - cx_in
    dpy = cy_out - cy_in
    dst = np.concatenate([p_out, p_in]).astype(np.int64)
    src = np.concatenate([p_in, p_out]).astype(np.int64)
    alpha = np.concatenate([0.5 * s_star, 0.5 * (1.0 - s_star)])
    half = np.full(len(s_star), 0.5)
    slope = np.concatenate([half, -half])
    tri2 = np.concatenate([t_rec, tid_f[p_out]]).astype(np.int64)
    px2 = np.concatenate([pxc, pxc])
    py2 = np.concatenate([pyc, pyc])
    bary, depth, valid = _extrapolate_at(fb, mesh, tri2, px2, py2)
    ea = np.concatenate([corners[rng, ii], corners[rng, ii]])
    eb = np.concatenate([corners[rng, jj], corners[rng, jj]])
    d_s_a = np.concatenate([ds_a, ds_a])
    d_s_b = np.concatenate([ds_b, ds_b])
    s2 = np.concatenate([s_star, s_star])
    # Outside halves average their final sample over the strip (s_prev
    # bounds its weight); inside halves keep a full-weight point sample
    # of whatever lies beyond the surface and carry the pair's whole
    # strip as subsegments instead, their value being
    # point + strip - hard[dst] (see AaRecords).
    sp2 = np.concatenate([sprev_out, np.full(len(s_star), -1e30)])
    subs = _assemble_subs(hops, bhops, e0, ok, fin_s_all, cx_in_all,
                          cy_in_all, cx_out_all, cy_out_all, fb, mesh)
    n_ok = len(t_rec)
    dup = [getattr(subs, f).copy() for f in SubSegs._FIELDS]
    dup[0] = dup[0] + n_ok
    dup = SubSegs(*dup)
    tail = SubSegs(np.arange(n_ok) + n_ok, t_rec, s_star, sprev_out,
                   bary[:n_ok], depth[:n_ok], pxc, pyc, valid[:n_ok],
                   corners[rng, ii], corners[rng, jj], ds_a, ds_b)
    merged = [np.concatenate([getattr(p, f) for p in (subs, dup, tail)])
              for f in SubSegs._FIELDS]
    order = np.lexsort((merged[2], merged[0]))
    subs = SubSegs(*(a[order] for a in merged))
    return AaRecords(dst, src, alpha, slope, tri2, bary, depth, px2, py2,
                     np.concatenate([dpx, dpx]), np.concatenate([dpy, dpy]),
                     ea, eb, d_s_a, d_s_b, valid, s2, sp2, subs)


def _assemble_subs(hops: list, bhops: list, e0: np.ndarray, ok: np.ndarray,
                   fin_s: np.ndarray,
                   cx_in: np.ndarray, cy_in: np.ndarray,
                   cx_out: np.ndarray, cy_out: np.ndarray,
                   fb: FrameBufferSet, mesh: TriangleMesh) -> SubSegs:
    """Flatten walk hops into strip subsegment rows (see SubSegs)."""
    allh = hops + bhops
    if not allh:
        return SubSegs.empty()
    raw = np.concatenate([h[0] for h in allh])
    tri = np.concatenate([h[1] for h in allh]).astype(np.int64)
    s = np.concatenate([h[3] for h in allh])
    prev = np.concatenate([h[4] for h in allh])
    ein = np.concatenate([h[5] for h in allh])
    eout = np.concatenate([h[6] for h in allh])
    ca = np.concatenate([h[7] for h in allh]).astype(np.int64)
    cb = np.concatenate([h[8] for h in allh]).astype(np.int64)
    if hops:
        # The chronologically first forward hop of each pair exits the
        # start face, whose lower bound is the backward pass's first
        # crossing rather than the walk-state placeholder.
        fraw = np.concatenate([h[0] for h in hops])
        _, first = np.unique(fraw, return_index=True)
        prev[first] = e0[fraw[first]]
    # Rows from unsettled walks, or wholly behind the one-pixel strip
    # ending at the final crossing, never carry weight.
    keep = ok[raw] & (s > fin_s[raw] - 1.0)
    if not keep.any():
        return SubSegs.empty()
    raw, tri, s, prev = raw[keep], tri[keep], s[keep], prev[keep]
    ein, eout, ca, cb = ein[keep], eout[keep], ca[keep], cb[keep]
    order = np.lexsort((s, raw))
    raw, tri, s, prev = raw[order], tri[order], s[order], prev[order]
    ein, eout, ca, cb = ein[order], eout[order], ca[order], cb[order]
    rec = (np.cumsum(ok) - 1)[raw]

    px = cx_in[raw] + s * (cx_out[raw] - cx_in[raw])
    py = cy_in[raw] + s * (cy_out[raw] - cy_in[raw])
    bary, depth, valid = _extrapolate_at(fb, mesh, tri, px, py)

    w_img, h_img = fb.image_size
    sa = _screen_from_clip(fb.clip[ca], w_img, h_img)
    sb = _screen_from_clip(fb.clip[cb], w_img, h_img)
    dlt = ein - eout
    ds_dein = -eout / dlt**2
    ds_deout = ein / dlt**2
    dein_da = np.stack([sb[:, 1] - cy_in[raw], cx_in[raw] - sb[:, 0]], axis=1)
    deout_da = np.stack([sb[:, 1] - cy_out[raw], cx_out[raw] - sb[:, 0]],
                        axis=1)
    dein_db = np.stack([cy_in[raw] - sa[:, 1], sa[:, 0] - cx_in[raw]], axis=1)
    deout_db = np.stack([cy_out[raw] - sa[:, 1], sa[:, 0] - cx_out[raw]],
                        axis=1)
    d_s_a = ds_dein[:, None] * dein_da + ds_deout[:, None] * deout_da
    d_s_b = ds_dein[:, None] * dein_db + ds_deout[:, None] * deout_db
    return SubSegs(rec, tri, s, prev, bary, depth, px, py, valid,
                   ca, cb, d_s_a, d_s_b)


def _blend_weights(records: AaRecords, n_pixels: int):
    """Per-record blend weight with the per-pixel total capped at 1/2.

    A straight edge can transfer at most half a cell before the winner id
    flips, so the sum of alphas landing on one destination pixel is capped
    at 0.5 (proportional rescale).  Without the cap a pixel reached by both
    a horizontal and a vertical record overshoots and the blended image
    jumps when its coverage flips; with it both sides of the flip meet at
    the half/half mix.  Returns (effective weights, alpha sums, cap mask).
    """
    sum_a = np.zeros(n_pixels, dtype=np.float64)
    np.add.at(sum_a, records.dst, records.alpha)
    scale = np.ones(n_pixels, dtype=np.float64)
    capped = sum_a > 0.5
    scale[capped] = 0.5 / sum_a[capped]
    return records.alpha * scale[records.dst], sum_a, capped


def _attr_at(mesh: TriangleMesh, kind: str, tri: np.ndarray,
             bary: np.ndarray, depth: np.ndarray,
             light: SHLighting | None,
             albedo: TextureImage | None) -> np.ndarray:
    """Surface attribute of the given fragments, (rows, channels)."""
    if kind == "depth":
        return depth[:, None].copy()
    vn = vertex_normals(mesh)
    nraw = np.einsum("pk,pkj->pj", bary, vn[mesh.faces[tri]])
    nlen = np.maximum(np.linalg.norm(nraw, axis=1, keepdims=True), 1e-300)
    nhat = nraw / nlen
    if kind == "normal":
        return nhat
    if light is None or albedo is None or mesh.corner_uvs is None:
        raise ValueError("color records need light, albedo and UVs")
    uv = np.einsum("pk,pkj->pj", bary, mesh.corner_uvs[tri])
    texval, _ = bilinear_lookup(albedo.texels, uv)
    return texval * light.irradiance(nhat)


def _strip_weights(records: AaRecords, main_ok: np.ndarray):
    """Blend weights of each record's own sample, strip and hard pixel.

    Outside halves weight their final sample by its strip overlap
    (w_main) with the subsegments covering the rest, summing to 1.
    Inside halves keep w_main = 1 for their point sample and add the
    pair's strip minus the destination's hard value (h_coef = -1), a
    zero-sum correction that swaps the hard point sample for the strip
    average as the record's weight reaches one half, exactly matching
    the other side of a coverage handoff.  Subsegments whose plane is
    unusable, or whose parent is not in ``main_ok``, go inert: their
    weight hands back to the final sample (outside) or the hard
    coefficient (inside), freezing that share of the average.
    """
    w_main = np.minimum(records.s - records.s_prev, 1.0)
    h_coef = np.where(main_ok & (records.slope < 0), -1.0, 0.0)
    subs = records.subs
    if not len(subs):
        return w_main, np.zeros(0), np.zeros(0, dtype=bool), h_coef
    lo = records.s[subs.rec] - 1.0
    w_sub = np.maximum(0.0, subs.s - np.maximum(subs.prev, lo))
    active = main_ok[subs.rec] & subs.valid
    inert = ~active & main_ok[subs.rec]
    into_h = inert & (records.slope[subs.rec] < 0)
    np.add.at(h_coef, subs.rec[into_h], w_sub[into_h])
    into_m = inert & ~into_h
    np.add.at(w_main, subs.rec[into_m], w_sub[into_m])
    return w_main, w_sub, active, h_coef


def record_values(records: AaRecords, fb: FrameBufferSet, mesh: TriangleMesh,
                  kind: str, image: np.ndarray,
                  light: SHLighting | None = None,
                  albedo: TextureImage | None = None) -> np.ndarray:
    """Per-record source values for the silhouette blend.

    ``kind`` is "color", "depth" or "normal" and selects how the source
    surface is shaded at the record's crossing point (averaged over the
    strip subsegments where present).  Background records take the
    channel's background constant and records without a usable surface
    plane fall back to the src pixel of ``image`` (the hard image the
    blend starts from).  Returns (n_records, channels).
    """
    flat = (image.reshape(-1, image.shape[-1]) if image.ndim == 3
            else image.reshape(-1, 1))
    vals = flat[records.src].astype(np.float64, copy=True)
    if not len(records):
        return vals
    bg = records.tri < 0
    if kind == "depth":
        vals[bg] = fb.background_depth
    elif kind == "normal":
        vals[bg] = 0.0
    elif kind == "color":
        vals[bg] = fb.background_color
    else:
        raise ValueError(f"unknown channel kind {kind!r}")
    m = ~bg & records.valid
    ok = m | bg
    if m.any():
        vals[m] = _attr_at(mesh, kind, records.tri[m], records.bary[m],
                           records.depth[m], light, albedo)
    w_main, w_sub, active, h_coef = _strip_weights(records, ok)
    subs = records.subs
    vals[ok] *= w_main[ok, None]
    if len(subs) and active.any():
        a_sub = _attr_at(mesh, kind, subs.tri[active], subs.bary[active],
                         subs.depth[active], light, albedo)
        np.add.at(vals, subs.rec[active], w_sub[active, None] * a_sub)
    hc = h_coef != 0.0
    if hc.any():
        vals[hc] += h_coef[hc, None] * flat[records.dst[hc]]
    return vals


def apply_aa(image: np.ndarray, records: AaRecords,
             values: np.ndarray | None = None) -> np.ndarray:
    """Blend an image along the silhouette band, order-independently.

    ``values`` are the per-record source values (see record_values);
    without them the src pixel's own value is used, which is only
    appropriate for images that are piecewise constant across silhouettes
    (masks, id maps).
    """
    flat = image.reshape(-1, image.shape[-1]) if image.ndim == 3 else image.reshape(-1, 1)
    out = flat.copy()
    if len(records):
        eff, _, _ = _blend_weights(records, flat.shape[0])
        src_vals = flat[records.src] if values is None else values
        delta = eff[:, None] * (src_vals - flat[records.dst])
        np.add.at(out, records.dst, delta)
    return out.reshape(image.shape)


def blend_image(image: np.ndarray, records: AaRecords, fb: FrameBufferSet,
                mesh: TriangleMesh, kind: str,
                light: SHLighting | None = None,
                albedo: TextureImage | None = None) -> np.ndarray:
    """record_values + apply_aa in one step for a hard rendered image."""
    vals = record_values(records, fb, mesh, kind, image, light, albedo)
    return apply_aa(image, records, vals)


def soft_coverage(fb: FrameBufferSet, records: AaRecords) -> np.ndarray:
    """Pixels carrying any surface content: hard coverage plus the blend
    band.  Loss terms that count pixels should use this notion, because
    it grows and shrinks continuously under mesh motion (band pixels
    enter at alpha 0) where the hard bit flips mid-band with the blended
    value far from the background."""
    cov = fb.coverage.copy()
    if len(records):
        cov.reshape(-1)[records.dst] = True
    return cov


def _screen_jacobian_rows(clip: np.ndarray, cam: Camera):
    """d(screen X)/d(world vertex) and d(screen Y)/d(world vertex).

    clip (...,4) are the vertex clip coordinates; returns two (...,3)
    arrays of world-space gradient rows.
    """
    w_img, h_img = cam.image_size
    r0 = cam.projection[0, :3]
    r1 = cam.projection[1, :3]
    r3 = cam.projection[3, :3]
    cw = clip[..., 3]
    cw = np.where(np.abs(cw) < 1e-9, np.where(cw < 0, -1e-9, 1e-9), cw)
    fx = (0.5 * w_img / cw)[..., None]
    fy = (-0.5 * h_img / cw)[..., None]
    dx = fx * (r0 - (clip[..., 0] / cw)[..., None] * r3)
    dy = fy * (r1 - (clip[..., 1] / cw)[..., None] * r3)
    return dx, dy


def _aa_upstream(grad_blended: np.ndarray, hard: np.ndarray,
                 records: AaRecords, values: np.ndarray):
    """Unchain the blend.

    Returns gradients w.r.t. the hard image, the record alphas, and the
    record source values.  Records that fell back to copying their src
    pixel route the value gradient into the hard image instead.
    """
    c = grad_blended.shape[-1] if grad_blended.ndim == 3 else 1
    g = grad_blended.reshape(-1, c)
    h = hard.reshape(-1, c)
    g_hard = g.copy()
    if not len(records):
        return g_hard.reshape(grad_blended.shape), np.zeros(0), \
            np.zeros((0, c))
    eff, sum_a, capped = _blend_weights(records, h.shape[0])
    g_dst = g[records.dst]
    g_val = eff[:, None] * g_dst
    np.add.at(g_hard, records.dst, -g_val)
    fallback = (records.tri >= 0) & ~records.valid
    if fallback.any():
        np.add.at(g_hard, records.src[fallback], g_val[fallback])
    # Inside halves mix the dst pixel's own hard value into their source
    # value (h_coef, usually -1); that dependency also lands on the hard
    # image.
    _, _, _, h_coef = _strip_weights(records,
                                     records.valid | (records.tri < 0))
    hc = h_coef != 0.0
    if hc.any():
        np.add.at(g_hard, records.dst[hc],
                  (h_coef[hc] * eff[hc])[:, None] * g_dst[hc])
    # blended = dst + sum_k s(sum_a)*alpha_k*(val_k - dst) with
    # s = min(1, 0.5/sum_a); the alpha_m derivative picks up a rescale
    # term -0.5/sum_a^2 * sum_k alpha_k*(val_k - dst) on capped pixels.
    base = ((values - h[records.dst]) * g_dst).sum(axis=1)
    scale_rec = np.where(capped[records.dst], 0.5 / sum_a[records.dst], 1.0)
    g_alpha = scale_rec * base
    tdotg = np.zeros(h.shape[0], dtype=np.float64)
    np.add.at(tdotg, records.dst, records.alpha * base)
    ds_rec = np.where(capped[records.dst],
                      -0.5 / sum_a[records.dst] ** 2, 0.0)
    g_alpha += ds_rec * tdotg[records.dst]
    return g_hard.reshape(grad_blended.shape), g_alpha, g_val


def _scatter_crossing(edge_a: np.ndarray, edge_b: np.ndarray,
                      d_s_a: np.ndarray, d_s_b: np.ndarray,
                      g_s: np.ndarray, fb: FrameBufferSet, cam: Camera,
                      grad_v: np.ndarray) -> None:
    """Scatter d loss / d crossing through ds/d(edge endpoint screens)."""
    if not len(g_s):
        return
    for vid, dsv in ((edge_a, d_s_a), (edge_b, d_s_b)):
        dx, dy = _screen_jacobian_rows(fb.clip[vid], cam)
        contrib = g_s[:, None] * (dsv[:, 0:1] * dx + dsv[:, 1:2] * dy)
        np.add.at(grad_v, vid, contrib)


def backward(fb: FrameBufferSet, mesh: TriangleMesh, cam: Camera, *,
             d_color: np.ndarray | None = None,
             d_depth: np.ndarray | None = None,
             d_normal: np.ndarray | None = None,
             light: SHLighting | None = None,
             albedo: TextureImage | None = None,
             color_records: AaRecords | None = None,
             depth_records: AaRecords | None = None,
             normal_records: AaRecords | None = None):
    """Pixel-gradient to parameter-gradient chain.

    d_color / d_depth / d_normal are upstream gradients with respect to
    the images the loss consumed; when the matching records argument is
    given those images are understood as blended and the blend is
    unchained first (alpha gradients flow to silhouette edge endpoints).
    Returns (d_vertices (n,3), d_texels (t,t,3) or None without an albedo).

    Fragments of near-clipped or screen-degenerate faces keep their
    world-space attribute gradients (texels, vertex normals) but drop the
    screen-position chain, whose projected corners are unreliable there.
    """
    n = mesh.n_vertices
    grad_v = np.zeros((n, 3), dtype=np.float64)
    grad_t = (np.zeros_like(albedo.texels) if albedo is not None else None)
    if d_color is not None and (light is None or albedo is None):
        raise ValueError("color gradients need light and albedo")

    rows, cols = fb.covered()
    p_count = len(rows)

    # Recompute the hard images the blends started from, as needed.
    need_color = d_color is not None
    need_normal_img = d_normal is not None
    hard_color = shade_color(fb, mesh, light, albedo) if need_color else None
    hard_depth = fb.depth if d_depth is not None else None
    hard_normal = render_normal(fb, mesh) if need_normal_img else None

    frag_jobs = []
    if need_color and color_records is not None:
        vals = record_values(color_records, fb, mesh, "color", hard_color,
                             light, albedo)
        d_color, g_alpha, g_val = _aa_upstream(d_color, hard_color,
                                               color_records, vals)
        frag_jobs.append((color_records, g_alpha, g_val, "color"))
    if d_depth is not None and depth_records is not None:
        vals = record_values(depth_records, fb, mesh, "depth", hard_depth)
        d_depth, g_alpha, g_val = _aa_upstream(d_depth, hard_depth,
                                               depth_records, vals)
        frag_jobs.append((depth_records, g_alpha, g_val, "depth"))
    if need_normal_img and normal_records is not None:
        vals = record_values(normal_records, fb, mesh, "normal", hard_normal)
        d_normal, g_alpha, g_val = _aa_upstream(d_normal, hard_normal,
                                                normal_records, vals)
        frag_jobs.append((normal_records, g_alpha, g_val, "normal"))

    def fragment_chain(tri, b, pdepth, px, py, gc, gd, gn_img):
        """Chain per-fragment gradients back to grad_v / grad_t.

        A fragment is a face ``tri`` sampled with perspective-correct
        barycentrics ``b`` and depth ``pdepth`` at screen point (px, py);
        gc / gd / gn_img are the upstream gradients of its shaded color,
        depth and unit normal.  Returns d loss / d (px, py) for callers
        whose sample points move with the geometry; for fixed pixel
        centers that return value is simply discarded.
        """
        p_cnt = len(tri)
        corners = mesh.faces[tri]                        # (P,3)
        need_c = gc is not None
        need_n = gn_img is not None

        vn = nraw = nhat = None
        if need_c or need_n:
            vn = vertex_normals(mesh)
            nraw = np.einsum("pk,pkj->pj", b, vn[corners])
            nlen = np.linalg.norm(nraw, axis=1, keepdims=True)
            nlen = np.maximum(nlen, 1e-300)
            nhat = nraw / nlen

        g_b = np.zeros((p_cnt, 3), dtype=np.float64)
        g_nhat = np.zeros((p_cnt, 3), dtype=np.float64)

        if need_c:
            cuv = mesh.corner_uvs
            if cuv is None:
                raise ValueError("mesh has no UV parametrization")
            uv = np.einsum("pk,pkj->pj", b, cuv[tri])
            t_res = albedo.resolution
            texval, (r0, c0, fr, fc) = bilinear_lookup(albedo.texels, uv)
            irr = light.irradiance(nhat)

            # Texel scatter: d pixel / d texel = bilinear weight * irradiance.
            g_tex = gc * irr
            r1 = np.minimum(r0 + 1, t_res - 1)
            c1 = np.minimum(c0 + 1, t_res - 1)
            np.add.at(grad_t, (r0, c0), g_tex * ((1 - fr) * (1 - fc))[:, None])
            np.add.at(grad_t, (r0, c1), g_tex * ((1 - fr) * fc)[:, None])
            np.add.at(grad_t, (r1, c0), g_tex * (fr * (1 - fc))[:, None])
            np.add.at(grad_t, (r1, c1), g_tex * (fr * fc)[:, None])

            # UV chain: clamp-to-edge zeroes the derivative outside the grid.
            t00 = albedo.texels[r0, c0]
            t01 = albedo.texels[r0, c1]
            t10 = albedo.texels[r1, c0]
            t11 = albedo.texels[r1, c1]
            dval_dfc = ((t01 - t00) * (1 - fr)[:, None] + (t11 - t10) * fr[:, None])
            dval_dfr = ((t10 - t00) * (1 - fc)[:, None] + (t11 - t01) * fc[:, None])
            x = uv[:, 0] * t_res - 0.5
            y = uv[:, 1] * t_res - 0.5
            gate_x = ((x >= 0) & (x <= t_res - 1)).astype(np.float64)
            gate_y = ((y >= 0) & (y <= t_res - 1)).astype(np.float64)
            g_u = (g_tex * dval_dfc).sum(axis=1) * t_res * gate_x
            g_v = (g_tex * dval_dfr).sum(axis=1) * t_res * gate_y
            g_uv = np.stack([g_u, g_v], axis=1)
            g_b += np.einsum("pj,pkj->pk", g_uv, cuv[tri])

            # Shading chain: d pixel / d normal = texel * dE/dn.
            g_irr = gc * texval
            g_nhat += np.einsum("pc,pcj->pj", g_irr, light.irradiance_grad(nhat))

        if need_n:
            g_nhat += gn_img

        if need_c or need_n:
            # Through normalization, then split between barycentrics and
            # the vertex-normal field.
            g_nraw = (g_nhat - (g_nhat * nhat).sum(axis=1, keepdims=True) * nhat)
            g_nraw /= np.maximum(np.linalg.norm(nraw, axis=1, keepdims=True), 1e-300)
            g_b += np.einsum("pj,pkj->pk", g_nraw, vn[corners])
            g_vn = np.zeros((n, 3), dtype=np.float64)
            np.add.at(g_vn, corners, b[:, :, None] * g_nraw[:, None, :])
            _vertex_normal_backward(mesh, g_vn, grad_v)

        # Screen-space chain: barycentrics and depth to corner positions.
        clipc = fb.clip[corners]                         # (P,3,4)
        guard = fb.clipped_faces[tri]
        s = _screen_from_clip(clipc, fb.width, fb.height, w_safe_eps=1e-9)
        e = np.empty((p_cnt, 3), dtype=np.float64)
        for k in range(3):
            a = s[:, (k + 1) % 3]
            bb = s[:, (k + 2) % 3]
            e[:, k] = _cross2(bb[:, 0] - a[:, 0], bb[:, 1] - a[:, 1],
                              px - a[:, 0], py - a[:, 1])
        area = e.sum(axis=1)
        guard |= np.abs(area) <= _AREA_EPS
        area_safe = np.where(np.abs(area) <= _AREA_EPS, 1.0, area)
        wk = clipc[:, :, 3]
        wk_safe = np.where(np.abs(wk) < 1e-9, np.where(wk < 0, -1e-9, 1e-9), wk)
        beta = e / area_safe[:, None]

        g_q = (g_b - (g_b * b).sum(axis=1, keepdims=True)) * pdepth[:, None]
        if gd is not None:
            g_q += (-gd * pdepth**2)[:, None]
        g_beta = g_q / wk_safe
        g_w = -g_q * beta / wk_safe**2
        g_e = (g_beta - (g_beta * beta).sum(axis=1, keepdims=True)) / area_safe[:, None]

        g_s = np.zeros((p_cnt, 3, 2), dtype=np.float64)
        g_px = np.zeros(p_cnt, dtype=np.float64)
        g_py = np.zeros(p_cnt, dtype=np.float64)
        for k in range(3):
            i = (k + 1) % 3
            j = (k + 2) % 3
            gek = g_e[:, k]
            g_s[:, i, 0] += gek * (s[:, j, 1] - py)
            g_s[:, i, 1] += gek * (px - s[:, j, 0])
            g_s[:, j, 0] += gek * (py - s[:, i, 1])
            g_s[:, j, 1] += gek * (s[:, i, 0] - px)
            g_px += gek * (s[:, i, 1] - s[:, j, 1])
            g_py += gek * (s[:, j, 0] - s[:, i, 0])

        dx, dy = _screen_jacobian_rows(clipc, cam)       # (P,3,3) each
        r3 = cam.projection[3, :3]
        contrib = (g_s[:, :, 0:1] * dx + g_s[:, :, 1:2] * dy
                   + g_w[:, :, None] * r3)
        contrib[guard] = 0.0
        np.add.at(grad_v, corners, contrib)
        g_px[guard] = 0.0
        g_py[guard] = 0.0
        return g_px, g_py

    if p_count:
        tri = fb.tri_id[rows, cols]
        gc = d_color[rows, cols] if need_color else None
        gd = d_depth[rows, cols] if d_depth is not None else None
        gn_img = d_normal[rows, cols] if need_normal_img else None
        fragment_chain(tri, fb.full_bary(), fb.depth[rows, cols],
                       cols + 0.5, rows + 0.5, gc, gd, gn_img)

    def chain_kind(kind, tri, bary, depth, px, py, up):
        gc = up if kind == "color" else None
        gd = up[:, 0] if kind == "depth" else None
        gn_img = up if kind == "normal" else None
        return fragment_chain(tri, bary, depth, px, py, gc, gd, gn_img)

    for records, g_alpha, g_val, kind in frag_jobs:
        # d loss / d s* has three parts: the blend weight is linear in
        # s*, the crossing point the final sample is taken at moves along
        # the pixel-pair segment with s*, and the strip the subsegment
        # average covers ends at s*.  Subsegment crossings get the same
        # moving-point and weight-overlap treatment.
        g_s_star = g_alpha * records.slope
        m = (records.tri >= 0) & records.valid
        subs = records.subs
        w_main, w_sub, active, _ = _strip_weights(records,
                                                  m | (records.tri < 0))
        if m.any():
            g_px, g_py = chain_kind(kind, records.tri[m], records.bary[m],
                                    records.depth[m], records.px[m],
                                    records.py[m],
                                    w_main[m, None] * g_val[m])
            move = np.zeros(len(records), dtype=np.float64)
            move[m] = g_px * records.dpx[m] + g_py * records.dpy[m]
            g_s_star = g_s_star + move
        if len(subs) and active.any():
            rec_a = subs.rec[active]
            g_pxs, g_pys = chain_kind(kind, subs.tri[active],
                                      subs.bary[active], subs.depth[active],
                                      subs.px[active], subs.py[active],
                                      w_sub[active, None] * g_val[rec_a])
            g_u = np.zeros(len(subs), dtype=np.float64)
            g_u[active] = (g_pxs * records.dpx[rec_a]
                           + g_pys * records.dpy[rec_a])
            # Weight chain.  g_w are d loss / d (overlap weight); rows
            # whose weight was handed back to the final sample keep zero
            # (their weight is treated as frozen, an a.e.-exact shortcut
            # since unusable planes at a crossing are boundary cases).
            a_main = _attr_at(mesh, kind, records.tri[m], records.bary[m],
                              records.depth[m], light, albedo)
            a_sub = _attr_at(mesh, kind, subs.tri[active], subs.bary[active],
                             subs.depth[active], light, albedo)
            g_wmain = np.zeros(len(records))
            g_wmain[m] = (g_val[m] * a_main).sum(axis=1)
            g_w = np.zeros(len(subs))
            g_w[active] = (g_val[rec_a] * a_sub).sum(axis=1)
            lo = records.s[subs.rec] - 1.0
            gate = subs.prev > lo
            # Own overlap grows with the crossing; the previous stored
            # row (the hop this one measures from) loses the same span,
            # and hops below the strip start trade against it instead.
            g_u += g_w
            if len(subs) > 1:
                same = subs.rec[1:] == subs.rec[:-1]
                g_u[:-1] -= np.where(same & gate[1:], g_w[1:], 0.0)
            np.add.at(g_s_star, subs.rec, -g_w * ~gate)
            gate_main = records.s_prev > records.s - 1.0
            g_s_star += g_wmain * gate_main
            last = np.ones(len(subs), dtype=bool)
            last[:-1] = subs.rec[:-1] != subs.rec[1:]
            gm = last & gate_main[subs.rec]
            g_u[gm] -= g_wmain[subs.rec[gm]]
            _scatter_crossing(subs.edge_a, subs.edge_b, subs.d_s_a,
                              subs.d_s_b, g_u, fb, cam, grad_v)
        _scatter_crossing(records.edge_a, records.edge_b, records.d_s_a,
                          records.d_s_b, g_s_star, fb, cam, grad_v)

    return grad_v, grad_t


def _vertex_normal_backward(mesh: TriangleMesh, g_vn: np.ndarray,
                            grad_v: np.ndarray) -> None:
    """Chain gradients on unit vertex normals back to vertex positions."""
    cross = mesh.face_cross()
    acc = np.zeros((mesh.n_vertices, 3), dtype=np.float64)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], cross)
    length = np.linalg.norm(acc, axis=1, keepdims=True)
    length = np.maximum(length, 1e-300)
    nhat = acc / length
    g_acc = (g_vn - (g_vn * nhat).sum(axis=1, keepdims=True) * nhat) / length

    g_cross = g_acc[mesh.faces[:, 0]] + g_acc[mesh.faces[:, 1]] + g_acc[mesh.faces[:, 2]]
    v = mesh.vertices[mesh.faces]
    u_edge = v[:, 1] - v[:, 0]
    t_edge = v[:, 2] - v[:, 0]
    g_u = np.cross(t_edge, g_cross)
    g_t = np.cross(g_cross, u_edge)
    np.add.at(grad_v, mesh.faces[:, 0], -g_u - g_t)
    np.add.at(grad_v, mesh.faces[:, 1], g_u)
    np.add.at(grad_v, mesh.faces[:, 2], g_t)
