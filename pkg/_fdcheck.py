"""Scratch harness: finite-difference pass rates for the render losses.

Temporary tooling while shaping the gradient-check fixture; not part of
the package.
"""
import sys
import time

import numpy as np

from meshreg.mesh import TriangleMesh, TextureImage
from meshreg.camera import Camera, SHLighting
from meshreg import losses


def icosahedron():
    phi = (1 + 5**0.5) / 2
    V = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                  [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                  [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]],
                 float)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    F = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return V, F


def subdivide(V, F, project=True):
    V = list(map(np.asarray, V))
    F2, mid = [], {}

    def m(a, b):
        k = (min(a, b), max(a, b))
        if k not in mid:
            p = 0.5 * (V[a] + V[b])
            if project:
                p = p / np.linalg.norm(p)
            mid[k] = len(V)
            V.append(p)
        return mid[k]

    for a, b, c in F:
        ab, bc, ca = m(a, b), m(b, c), m(c, a)
        F2 += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
    return np.array(V), np.array(F2)


def smooth_tex(tt, seed, lo=0.2, hi=0.8):
    g0, g1 = np.meshgrid(np.linspace(0, 1, tt), np.linspace(0, 1, tt),
                         indexing="ij")
    rng = np.random.default_rng(seed)
    a, b, c = rng.uniform(0.4, 0.9, 3)
    base = np.stack([0.5 + 0.5 * np.sin(2 * np.pi * a * g1),
                     0.5 + 0.5 * np.cos(2 * np.pi * b * g0),
                     0.5 + 0.5 * np.sin(2 * np.pi * c * (g0 + g1))], axis=2)
    return TextureImage(lo + (hi - lo) * base)


def make_cam(az, el, dist, roll, far=6.8, focal=85):
    eye = dist * np.array([np.sin(az) * np.cos(el), np.sin(el),
                           -np.cos(az) * np.cos(el)])
    fwd = -eye / np.linalg.norm(eye)
    r0 = np.cross(fwd, [0, 1, 0]); r0 /= np.linalg.norm(r0)
    u0 = np.cross(r0, fwd)
    up = np.cos(roll) * u0 - np.sin(roll) * r0
    return Camera.look_at(eye=eye, target=(0, 0, 0), up=up, focal_px=focal,
                          image_size=(64, 64), near=0.5, far=far)


def margin_search(V, F, az, el, dist, far, focal):
    E = set()
    for a, b, c in F:
        E |= {(min(a, b), max(a, b)), (min(b, c), max(b, c)),
              (min(a, c), max(a, c))}
    E = np.array(sorted(E))
    adj = {}
    for fi, (a, b, c) in enumerate(F):
        for e in ((a, b), (b, c), (c, a)):
            adj.setdefault((min(e), max(e)), []).append(fi)

    def margin_of(cam):
        scr = cam.clip_to_screen(cam.project(V))
        fn = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
        fc = V[F].mean(axis=1)
        front = ((fc - cam.center()) * fn).sum(axis=1) < 0
        worst = 90.0
        for (a, b) in E:
            fs = adj[(a, b)]
            if len(fs) != 2 or front[fs[0]] == front[fs[1]]:
                continue
            d = scr[b] - scr[a]
            ang = np.degrees(np.arctan2(d[1], d[0])) % 90.0
            worst = min(worst, ang, 90.0 - ang)
        return worst

    best = max(np.linspace(0, np.pi / 2, 181),
               key=lambda r: margin_of(make_cam(az, el, dist, r, far, focal)))
    return best, margin_of(make_cam(az, el, dist, best, far, focal))


def build(level, far=3.5, focal=60):
    # Cameras sit inside the closed icosahedron looking outward.  From
    # strictly inside a convex shell every face is back-oriented and the
    # frame is fully covered, so renders carry no silhouette records and
    # every pixel value is a smooth interpolation chain.  References are
    # synthetic two-block constants chosen outside the rendered value
    # ranges: each pixel's L1 residual keeps one sign across the
    # finite-difference window (block seams sit between fixed pixels and
    # never move with the mesh), making the losses locally linear while
    # both upstream signs stay exercised.  Silhouette terms are checked
    # separately at their own tolerance.
    V, F = icosahedron()
    for _ in range(level):
        V, F = subdivide(V, F, project=False)
    tmpl = TriangleMesh(V, F, uvs=np.clip(V[:, :2] * 0.45 + 0.5, 0, 1),
                        uv_indices=F)

    dirs = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1],
                     [1, 1, -1], [-1, -1, -1]], dtype=float)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cams = []
    for k, d in enumerate(dirs):
        eye = -0.12 * d + 0.03 * np.array([np.sin(2.1 * k), np.cos(1.7 * k),
                                           np.sin(1.3 * k + 0.8)])
        helper = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.9 else \
            np.array([1.0, 0.0, 0.0])
        r0 = np.cross(d, helper); r0 /= np.linalg.norm(r0)
        u0 = np.cross(r0, d)
        roll = 0.4 * k
        up = np.cos(roll) * u0 + np.sin(roll) * r0
        cams.append(Camera.look_at(eye=eye, target=eye + d, up=up,
                                   focal_px=focal, image_size=(64, 64),
                                   near=0.1, far=far))

    rng = np.random.default_rng(5)
    shc = 0.05 * rng.normal(size=(9, 3))
    shc[0] = 1.8
    shc[1:4] += np.array([[0.10], [0.14], [0.08]])
    light = SHLighting(shc)
    tex = smooth_tex(64, 2, 0.55, 0.95)

    refs, fgs, sds, sns = [], [], [], []
    for j in range(6):
        ref = np.zeros((64, 64, 3))
        ref[18 + 4 * j:] = 2.5
        refs.append(ref)
        fgs.append(np.ones((64, 64), dtype=bool))
        sd = np.full((64, 64), 0.15)
        sd[:, 40 - 3 * j:] = 3.2
        sds.append(sd)
        sn = np.full((64, 64, 3), -2.0)
        sn[26 + 2 * j:] = 2.0
        sns.append(sn)
    views = losses.ViewSet(cams, refs, fgs, sds, sns, light,
                           np.zeros(3))
    return tmpl, views, light, tex


def build_translation(level, far=6.8, focal=85):
    # Exterior views of the icosahedron against a dark background, with
    # references rendered from the same mesh shifted by a sub-pixel-scale
    # offset: the loss gradients are dominated by the silhouette blend
    # term.  Flat albedo under ambient light makes the color residual
    # vanish wherever both renders cover, isolating that term exactly.
    V, F = icosahedron()
    for _ in range(level):
        V, F = subdivide(V, F, project=False)
    uvs = np.clip(V[:, :2] * 0.45 + 0.5, 0, 1)
    tmpl = TriangleMesh(V, F, uvs=uvs, uv_indices=F)
    delta = np.array([0.022, -0.018, 0.025])
    scan = TriangleMesh(V + delta, F, uvs=uvs, uv_indices=F)

    azs = [0.13, 1.21, 2.12, 3.35, 4.17, 5.29]
    els = [-0.31, 0.24, -0.08, 0.37, 0.63, -0.52]
    dst = [4.5, 4.8, 4.65, 4.45, 4.9, 4.7]
    V0, F0 = icosahedron()
    cams = []
    for az, el, d in zip(azs, els, dst):
        roll, _ = margin_search(V0, F0, az, el, d, far, focal)
        cams.append(make_cam(az, el, d, roll, far, focal))
    shc = np.zeros((9, 3))
    shc[0] = 1.4
    light = SHLighting(shc)
    tex = TextureImage(np.full((8, 8, 3), 0.85))
    views = losses.ViewSet.from_scan(cams, scan, light, tex,
                                     background_color=(0.05, 0.05, 0.05))
    return tmpl, views, light, tex


def translation_check(tmpl, views, light, tex, verbose=True):
    """Whole-mesh translation gradients vs central differences, per axis."""
    V = tmpl.vertices
    h = 1e-3 * tmpl.bbox_diagonal()
    fns = {"color": lambda m: losses.color_loss(m, views, light, tex),
           "depth": lambda m: losses.depth_loss(m, views),
           "normal": lambda m: losses.normal_loss(m, views)}
    worst = 0.0
    for name, fn in fns.items():
        g = fn(tmpl)[1].sum(axis=0)
        for k in range(3):
            fd = (fn(tmpl.with_vertices(V + h * np.eye(3)[k]))[0]
                  - fn(tmpl.with_vertices(V - h * np.eye(3)[k]))[0]) / (2 * h)
            rel = abs(g[k] - fd) / max(abs(fd), 1e-12)
            worst = max(worst, rel)
            if verbose:
                print(f"{name}.{'xyz'[k]}: a={g[k]:+.4f} fd={fd:+.4f} "
                      f"rel={rel:.3f}")
    return worst


def protocol(tmpl, views, light, tex_t, n_sample=200, seed=77, verbose=True):
    V = tmpl.vertices
    fns = {"color": lambda m: losses.color_loss(m, views, light, tex_t),
           "depth": lambda m: losses.depth_loss(m, views),
           "normal": lambda m: losses.normal_loss(m, views)}
    h = 1e-3 * tmpl.bbox_diagonal()
    rng = np.random.default_rng(seed)
    if n_sample >= V.size:
        sample = np.arange(V.size)
    else:
        sample = rng.choice(V.size, size=n_sample, replace=False)
    t0 = time.time()
    rates = {}
    for name, fn in fns.items():
        _, g = fn(tmpl)
        gf = g.ravel()
        good = tot = 0
        fails = []
        for flat in sample:
            a = gf[flat]
            if abs(a) <= 1e-6:
                continue
            i, k = divmod(flat, 3)
            vp = V.copy(); vp[i, k] += h
            vm = V.copy(); vm[i, k] -= h
            fd = (fn(tmpl.with_vertices(vp))[0]
                  - fn(tmpl.with_vertices(vm))[0]) / (2 * h)
            rel = abs(a - fd) / max(abs(fd), 1e-12)
            tot += 1
            if rel < 1e-2:
                good += 1
            else:
                fails.append((rel, i, k, a, fd))
        fails.sort(reverse=True)
        rates[name] = good / max(tot, 1)
        if verbose:
            print(f"{name}: {good}/{tot} ({100 * rates[name]:.1f}%)  "
                  + " ".join(f"v{i}.{'xyz'[k]}:{r:.1e}(a={a:.1e},fd={fd:.1e})"
                             for r, i, k, a, fd in fails[:5]))
    if verbose:
        print(f"elapsed {time.time() - t0:.1f}s")
    return rates


if __name__ == "__main__":
    level = int(sys.argv[1]) if len(sys.argv) > 1 else 2
    n = int(sys.argv[2]) if len(sys.argv) > 2 else 200
    tmpl, views, light, tex_t = build(level)
    protocol(tmpl, views, light, tex_t, n_sample=n)
