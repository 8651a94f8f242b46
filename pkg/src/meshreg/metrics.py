"""Geometric and image-space evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import convolve1d

from .mesh import TriangleMesh


# -- exact point/triangle geometry ----------------------------------------


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest points on triangles (a, b, c) to points p, all broadcastable
    (..., 3). Returns (squared distance, closest point)."""
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def safe_div(num, den):
        return num / np.where(den == 0.0, 1.0, den)

    # interior (default), then override by edge/vertex regions
    denom = va + vb + vc
    v = safe_div(vb, denom)[..., None]
    w = safe_div(vc, denom)[..., None]
    closest = a + ab * v + ac * w

    t_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))[..., None]
    on_bc = b + (c - b) * t_bc
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    closest = np.where(m[..., None], on_bc, closest)

    on_ac = a + ac * safe_div(d2, d2 - d6)[..., None]
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(m[..., None], on_ac, closest)

    on_ab = a + ab * safe_div(d1, d1 - d3)[..., None]
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(m[..., None], on_ab, closest)

    m = (d6 >= 0) & (d5 <= d6)
    closest = np.where(m[..., None], np.broadcast_to(c, closest.shape), closest)
    m = (d3 >= 0) & (d4 <= d3)
    closest = np.where(m[..., None], np.broadcast_to(b, closest.shape), closest)
    m = (d1 <= 0) & (d2 <= 0)
    closest = np.where(m[..., None], np.broadcast_to(a, closest.shape), closest)

    diff = p - closest
    return (diff * diff).sum(-1), closest


class MeshBVH:
    """Static axis-aligned box tree over triangles with batched queries.

    The tree only prunes; leaf tests use the exact point-triangle distance,
    so results equal brute force bit-for-bit up to float associativity.
    """

    def __init__(self, mesh: TriangleMesh, leaf_size: int = 8):
        if mesh.n_faces == 0:
            raise ValueError("mesh has no faces")
        self.tri = mesh.vertices[mesh.faces]  # (f, 3, 3)
        lo = self.tri.min(axis=1)
        hi = self.tri.max(axis=1)
        centers = 0.5 * (lo + hi)

        order = np.arange(mesh.n_faces)
        nodes_lo: list[np.ndarray] = []
        nodes_hi: list[np.ndarray] = []
        left: list[int] = []
        right: list[int] = []
        start: list[int] = []
        count: list[int] = []

        def build(idx: np.ndarray, offset: int) -> int:
            node = len(nodes_lo)
            nodes_lo.append(lo[idx].min(axis=0))
            nodes_hi.append(hi[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(offset)
            count.append(len(idx))
            if len(idx) > leaf_size:
                axis = int(np.argmax(nodes_hi[node] - nodes_lo[node]))
                half = len(idx) // 2
                part = np.argsort(centers[idx, axis], kind="stable")
                idx[:] = idx[part]
                l = build(idx[:half], offset)
                r = build(idx[half:], offset + half)
                left[node] = l
                right[node] = r
                count[node] = 0
            return node

        build(order, 0)
        self.order = order
        self.node_lo = np.asarray(nodes_lo)
        self.node_hi = np.asarray(nodes_hi)
        self.left = np.asarray(left)
        self.right = np.asarray(right)
        self.start = np.asarray(start)
        self.count = np.asarray(count)

    def _box_dist2(self, node: int, p: np.ndarray) -> np.ndarray:
        d = np.maximum(self.node_lo[node] - p, 0.0) + np.maximum(p - self.node_hi[node], 0.0)
        return (d * d).sum(-1)

    def query(self, points: np.ndarray):
        """Nearest squared distance and face index for each point."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        m = len(p)
        best_d2 = np.full(m, np.inf)
        best_f = np.zeros(m, dtype=np.int64)
        stack: list[tuple[int, np.ndarray]] = [(0, np.arange(m))]
        while stack:
            node, idx = stack.pop()
            d2box = self._box_dist2(node, p[idx])
            keep = d2box < best_d2[idx]
            idx = idx[keep]
            if not len(idx):
                continue
            if self.left[node] < 0:
                s = self.start[node]
                leaf = self.order[s : s + self.count[node]]
                t = self.tri[leaf]
                d2, _ = closest_point_on_triangles(
                    p[idx][:, None, :], t[None, :, 0], t[None, :, 1], t[None, :, 2]
                )
                k = np.argmin(d2, axis=1)
                dmin = d2[np.arange(len(idx)), k]
                better = dmin < best_d2[idx]
                upd = idx[better]
                best_d2[upd] = dmin[better]
                best_f[upd] = leaf[k[better]]
            else:
                l, r = int(self.left[node]), int(self.right[node])
                centroid = p[idx].mean(axis=0)
                dl = self._box_dist2(l, centroid)
                dr = self._box_dist2(r, centroid)
                if dl <= dr:
                    stack.append((r, idx))
                    stack.append((l, idx))
                else:
                    stack.append((l, idx))
                    stack.append((r, idx))
        return best_d2, best_f


def point_to_mesh_distance(points: np.ndarray, mesh: TriangleMesh, method: str = "bvh"):
    """Exact unsigned distance from each point to the mesh surface.

    Returns (distances, face indices). ``method`` is "bvh" (default) or
    "brute"; both are exact, "brute" exists as the cross-check oracle.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if method == "bvh":
        d2, f = MeshBVH(mesh).query(p)
        return np.sqrt(d2), f
    if method != "brute":
        raise ValueError(f"unknown method {method!r}")
    tri = mesh.vertices[mesh.faces]
    best = np.full(len(p), np.inf)
    bestf = np.zeros(len(p), dtype=np.int64)
    chunk = max(1, int(4e6 // max(len(tri), 1)))
    for s in range(0, len(p), chunk):
        q = p[s : s + chunk]
        d2, _ = closest_point_on_triangles(
            q[:, None, :], tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
        )
        k = np.argmin(d2, axis=1)
        best[s : s + chunk] = np.sqrt(d2[np.arange(len(q)), k])
        bestf[s : s + chunk] = k
    return best, bestf


# -- surface sampling -------------------------------------------------------


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0):
    """Area-uniform surface samples; counter-based RNG so the draw depends
    only on (seed, n). Returns (points, source face indices)."""
    rng = np.random.Generator(np.random.Philox(seed))
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")
    cum = np.cumsum(areas)
    u = rng.random(n) * total
    fidx = np.searchsorted(cum, u, side="right")
    fidx = np.minimum(fidx, mesh.n_faces - 1)
    r1 = rng.random(n)
    r2 = rng.random(n)
    s = np.sqrt(r1)
    w0 = 1.0 - s
    w1 = s * (1.0 - r2)
    w2 = s * r2
    tri = mesh.vertices[mesh.faces[fidx]]
    pts = tri[:, 0] * w0[:, None] + tri[:, 1] * w1[:, None] + tri[:, 2] * w2[:, None]
    return pts, fidx


# -- geometric metrics ------------------------------------------------------


def chamfer_l1(a: TriangleMesh, b: TriangleMesh, samples: int = 20000, seed: int = 0,
               return_directed: bool = False):
    """Symmetric L1 chamfer distance: mean of the two directed means of
    exact point-to-surface distances over area-uniform samples."""
    pa, _ = sample_surface(a, samples, seed)
    pb, _ = sample_surface(b, samples, seed + 1)
    da = np.sqrt(MeshBVH(b).query(pa)[0]).mean()
    db = np.sqrt(MeshBVH(a).query(pb)[0]).mean()
    sym = 0.5 * (da + db)
    if return_directed:
        return float(sym), float(da), float(db)
    return float(sym)


def normal_consistency(a: TriangleMesh, b: TriangleMesh, samples: int = 20000,
                       seed: int = 0) -> float:
    """Mean |n_a . n_b| between sample normals and the face normal at the
    closest point on the other mesh, averaged over both directions."""

    def directed(src: TriangleMesh, dst: TriangleMesh, s: int) -> float:
        pts, fidx = sample_surface(src, samples, s)
        n_src = src.face_normals()[fidx]
        _, fdst = MeshBVH(dst).query(pts)
        n_dst = dst.face_normals()[fdst]
        return float(np.abs((n_src * n_dst).sum(axis=1)).mean())

    return 0.5 * (directed(a, b, seed) + directed(b, a, seed + 1))


def f_score(a: TriangleMesh, b: TriangleMesh, tau: float, samples: int = 20000,
            seed: int = 0):
    """F-score at distance threshold tau; returns (f, precision, recall).

    Precision: fraction of samples of ``a`` within tau of ``b``.
    Recall: fraction of samples of ``b`` within tau of ``a``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pa, _ = sample_surface(a, samples, seed)
    pb, _ = sample_surface(b, samples, seed + 1)
    da = np.sqrt(MeshBVH(b).query(pa)[0])
    db = np.sqrt(MeshBVH(a).query(pb)[0])
    precision = float((da <= tau).mean())
    recall = float((db <= tau).mean())
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return f, precision, recall


@dataclass
class GeoReport:
    chamfer_l1: float
    chamfer_directed: tuple[float, float]
    normal_consistency: float
    f_score: dict[str, float]
    samples: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImgReport:
    psnr: float
    ssim: float
    per_view: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_geometry(candidate: TriangleMesh, reference: TriangleMesh,
                      samples: int = 20000, seed: int = 0,
                      taus: tuple[float, ...] | None = None) -> GeoReport:
    """Bundle chamfer, normal consistency, and F-scores against a reference.

    Default thresholds: 0.5% and 1% of the reference bounding-box diagonal.
    """
    diag = reference.bbox_diagonal()
    if taus is None:
        taus = (0.005 * diag, 0.01 * diag)
    sym, da, db = chamfer_l1(candidate, reference, samples, seed, return_directed=True)
    nc = normal_consistency(candidate, reference, samples, seed)
    fs = {}
    for tau in taus:
        f, _, _ = f_score(candidate, reference, tau, samples, seed)
        fs[f"{tau:.6g}"] = f
    return GeoReport(
        chamfer_l1=sym,
        chamfer_directed=(da, db),
        normal_consistency=nc,
        f_score=fs,
        samples=samples,
        seed=seed,
    )


# -- image metrics ----------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB over all channels, capped."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(peak * peak / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean structural similarity over valid (unpadded) windows, averaged
    across channels for color images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError("image smaller than the SSIM window")

    kern = _gaussian_kernel(window, sigma)
    half = window // 2

    def filt(img: np.ndarray) -> np.ndarray:
        out = convolve1d(img, kern, axis=0, mode="constant")
        out = convolve1d(out, kern, axis=1, mode="constant")
        return out[half:-half, half:-half]

    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mx = filt(x)
        my = filt(y)
        mxx = filt(x * x)
        myy = filt(y * y)
        mxy = filt(x * y)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(num / den)
    return float(np.mean(vals))
