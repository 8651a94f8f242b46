"""Procedural genus-0 subjects and textures for synthetic scenes.

All generators are deterministic in their seed and emit closed,
outward-oriented meshes with a ready-made UV atlas: a cylindrical chart
for the equatorial band plus one disk chart per pole cap, each injective
on its own rectangle of the unit square.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import TextureImage, TriangleMesh

# Atlas layout.  Charts stay strictly inside their rectangles so bilinear
# texture taps near a chart border never read another chart's texels.
BAND_V_LO, BAND_V_HI = 0.04, 0.70
CAP_RADIUS = 0.115
CAP_CENTERS = {"north": (0.27, 0.855), "south": (0.73, 0.855)}


def globe_mesh(rings: int = 24, segments: int = 32) -> TriangleMesh:
    """Unit sphere as a latitude/longitude grid with the standard atlas.

    ``rings`` latitude steps between the poles (so rings-1 interior vertex
    rings) and ``segments`` longitude steps.  The band chart wraps in u
    through duplicated per-corner UVs at the seam column; the pole fans
    use the disk charts.
    """
    if rings < 3 or segments < 3:
        raise ValueError("need at least 3 rings and 3 segments")
    verts = [np.array([0.0, 1.0, 0.0])]
    for r in range(1, rings):
        th = np.pi * r / rings
        for j in range(segments):
            ph = 2 * np.pi * j / segments
            verts.append(np.array([np.sin(th) * np.cos(ph), np.cos(th),
                                   np.sin(th) * np.sin(ph)]))
    verts.append(np.array([0.0, -1.0, 0.0]))
    V = np.array(verts)
    north, south = 0, len(verts) - 1

    def ring_vert(r: int, j: int) -> int:
        return 1 + (r - 1) * segments + j % segments

    # Band chart UVs: (rings-1) rows of segments+1 columns (seam duplicated).
    uvs = []
    band = {}
    for r in range(1, rings):
        v = BAND_V_HI + (BAND_V_LO - BAND_V_HI) * (r - 1) / (rings - 2)
        for j in range(segments + 1):
            band[(r, j)] = len(uvs)
            uvs.append((j / segments, v))

    def cap_chart(name: str, ring: int):
        cx, cy = CAP_CENTERS[name]
        center = len(uvs)
        uvs.append((cx, cy))
        rim = {}
        for j in range(segments):
            ph = 2 * np.pi * j / segments
            rim[j] = len(uvs)
            uvs.append((cx + CAP_RADIUS * np.cos(ph),
                        cy + CAP_RADIUS * np.sin(ph)))
        return center, rim

    n_center, n_rim = cap_chart("north", 1)
    s_center, s_rim = cap_chart("south", rings - 1)

    faces, uv_idx = [], []
    for j in range(segments):
        faces.append((north, ring_vert(1, j + 1), ring_vert(1, j)))
        uv_idx.append((n_center, n_rim[(j + 1) % segments], n_rim[j]))
    for r in range(1, rings - 1):
        for j in range(segments):
            a, b = ring_vert(r, j), ring_vert(r, j + 1)
            c, d = ring_vert(r + 1, j), ring_vert(r + 1, j + 1)
            ua, ub = band[(r, j)], band[(r, j + 1)]
            uc, ud = band[(r + 1, j)], band[(r + 1, j + 1)]
            faces.append((a, b, d))
            uv_idx.append((ua, ub, ud))
            faces.append((a, d, c))
            uv_idx.append((ua, ud, uc))
    for j in range(segments):
        faces.append((south, ring_vert(rings - 1, j),
                      ring_vert(rings - 1, j + 1)))
        uv_idx.append((s_center, s_rim[j], s_rim[(j + 1) % segments]))

    return TriangleMesh(V, np.array(faces, dtype=np.int64),
                        uvs=np.array(uvs, dtype=np.float64),
                        uv_indices=np.array(uv_idx, dtype=np.int64))


def icosahedron_mesh(level: int = 0, project: bool = False) -> TriangleMesh:
    """Regular icosahedron subdivided ``level`` times by edge midpoints.

    Midpoints stay on the flat faces unless ``project`` lifts them to the
    unit sphere.  UVs are the planar xy projection of the vertices, which
    is not injective globally but serves closed-surface test fixtures.
    """
    phi = (1 + 5 ** 0.5) / 2
    V = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                  [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                  [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]],
                 dtype=np.float64)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    F = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]],
                 dtype=np.int64)
    for _ in range(level):
        verts = [v for v in V]
        mid: dict = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in mid:
                p = 0.5 * (verts[a] + verts[b])
                if project:
                    p = p / np.linalg.norm(p)
                mid[key] = len(verts)
                verts.append(p)
            return mid[key]

        out = []
        for a, b, c in F:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            out += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        V, F = np.array(verts), np.array(out, dtype=np.int64)
    uvs = np.clip(V[:, :2] * 0.45 + 0.5, 0.0, 1.0)
    return TriangleMesh(V, F, uvs=uvs, uv_indices=F)


@dataclass(frozen=True)
class BlobParams:
    """Blob-head generator parameters: an ellipsoid with smooth radial
    bumps and an optional mouth-like indentation on the front."""

    seed: int = 0
    rings: int = 28
    segments: int = 36
    radii: tuple = (0.85, 1.0, 0.9)
    bump_count: int = 8
    bump_amp: float = 0.10
    bump_width: float = 0.55
    mouth_depth: float = 0.0
    mouth_dir: tuple = (0.0, -0.45, 1.0)
    mouth_width: float = 0.38


def _radial_field(dirs: np.ndarray, params: BlobParams) -> np.ndarray:
    rng = np.random.default_rng(params.seed)
    rho = np.ones(len(dirs))
    for _ in range(params.bump_count):
        c = rng.normal(size=3)
        c /= np.linalg.norm(c)
        amp = params.bump_amp * rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0])
        width = params.bump_width * rng.uniform(0.7, 1.3)
        ang = np.arccos(np.clip(dirs @ c, -1.0, 1.0))
        rho += amp * np.exp(-((ang / width) ** 2))
    if params.mouth_depth > 0.0:
        m = np.asarray(params.mouth_dir, dtype=np.float64)
        m /= np.linalg.norm(m)
        ang = np.arccos(np.clip(dirs @ m, -1.0, 1.0))
        rho -= params.mouth_depth * np.exp(-((ang / params.mouth_width) ** 2))
    return rho


def blob_head(params: BlobParams) -> TriangleMesh:
    """Closed genus-0 blob: radial displacement keeps the star-shaped
    surface self-intersection-free as long as the field stays positive."""
    base = globe_mesh(params.rings, params.segments)
    dirs = base.vertices
    rho = _radial_field(dirs, params)
    if rho.min() <= 0.05:
        raise ValueError("radial field collapsed; reduce bump/mouth depth")
    V = rho[:, None] * dirs * np.asarray(params.radii)
    return TriangleMesh(V, base.faces, uvs=base.uvs,
                        uv_indices=base.uv_indices)


def blob_expression(subject_seed: int, expression: int,
                    base: BlobParams | None = None) -> BlobParams:
    """Expression variants of one subject: identical base bumps (the
    subject's identity), with the mouth indentation and a mild amplitude
    modulation varying per expression."""
    p = base or BlobParams()
    p = replace(p, seed=subject_seed)
    if expression == 0:
        return replace(p, mouth_depth=0.0)
    rng = np.random.default_rng(100000 + 97 * subject_seed + expression)
    return replace(
        p,
        mouth_depth=float(rng.uniform(0.14, 0.26)),
        mouth_width=float(p.mouth_width * rng.uniform(0.85, 1.2)),
        bump_amp=float(p.bump_amp * rng.uniform(0.9, 1.1)),
    )


def bust(seed: int = 0, rings: int = 20, segments: int = 26) -> TriangleMesh:
    """Smooth neutral head shape used to initialize template building: an
    ellipsoid with slight seeded radius jitter and no surface detail."""
    rng = np.random.default_rng(seed)
    radii = np.array([0.9, 1.05, 0.95]) * rng.uniform(0.97, 1.03, 3)
    base = globe_mesh(rings, segments)
    return TriangleMesh(base.vertices * radii, base.faces, uvs=base.uvs,
                        uv_indices=base.uv_indices)


def procedural_texture(resolution: int = 128, seed: int = 0,
                       low: float = 0.1, high: float = 0.9) -> TextureImage:
    """Smooth low-frequency RGB texture, values inside [low, high]."""
    rng = np.random.default_rng(seed)
    u, v = np.meshgrid(np.linspace(0, 1, resolution),
                       np.linspace(0, 1, resolution))
    tex = np.zeros((resolution, resolution, 3))
    for c in range(3):
        img = np.zeros_like(u)
        for _ in range(4):
            fu, fv = rng.uniform(0.5, 2.5, 2)
            pu, pv = rng.uniform(0, 2 * np.pi, 2)
            img += rng.uniform(0.3, 1.0) * np.cos(
                2 * np.pi * (fu * u + fv * v) + pu + pv)
        img -= img.min()
        if img.max() > 0:
            img /= img.max()
        tex[:, :, c] = low + (high - low) * img
    return TextureImage(tex)


def wave_texture(resolution: int, seed: int, low: float = 0.2,
                 high: float = 0.8) -> TextureImage:
    """Single low-frequency sine wave per channel, values in [low, high].

    Gentler than procedural_texture: with at most one wave period across
    the texture, bilinear sampling varies slowly texel to texel, which
    gradient-check fixtures rely on.
    """
    g0, g1 = np.meshgrid(np.linspace(0, 1, resolution),
                         np.linspace(0, 1, resolution), indexing="ij")
    rng = np.random.default_rng(seed)
    a, b, c = rng.uniform(0.4, 0.9, 3)
    base = np.stack([0.5 + 0.5 * np.sin(2 * np.pi * a * g1),
                     0.5 + 0.5 * np.cos(2 * np.pi * b * g0),
                     0.5 + 0.5 * np.sin(2 * np.pi * c * (g0 + g1))], axis=2)
    return TextureImage(low + (high - low) * base)


GENERATORS = {
    "blob-head": lambda seed, expression=0: blob_head(
        blob_expression(seed, expression)),
    "bust": lambda seed, expression=0: bust(seed),
    "globe": lambda seed, expression=0: globe_mesh(),
    "icosahedron": lambda seed, expression=0, level=2, project=False:
        icosahedron_mesh(level, project),
}


def generate(name: str, seed: int, expression: int = 0,
             **params) -> TriangleMesh:
    """Look up a generator by name; deterministic in its arguments."""
    if name not in GENERATORS:
        raise KeyError(f"unknown generator {name!r}; "
                       f"known: {sorted(GENERATORS)}")
    return GENERATORS[name](seed, expression=expression, **params)
