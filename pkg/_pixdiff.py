import sys
import numpy as np
from _fdcheck import build
from meshreg import losses, raster

level = int(sys.argv[1]); vid = int(sys.argv[2]); axis = int(sys.argv[3])
t0 = float(sys.argv[4]); t1 = float(sys.argv[5])
vsel = int(sys.argv[6]) if len(sys.argv) > 6 else None

tmpl, views, light, tex_t = build(level)

def resid_stack(m):
    out = []
    for j, cam in enumerate(views.cameras):
        fb = raster.rasterize(m, cam, views.background_color)
        rec = raster.silhouette_records(fb, m, cam)
        img = raster.blend_image(raster.render_depth(fb), rec, fb, m, "depth")
        out.append(np.abs(img - views.scan_depth[j]))
    return out

V0 = tmpl.vertices.copy(); V0[vid, axis] += t0
V1 = tmpl.vertices.copy(); V1[vid, axis] += t1
A = resid_stack(tmpl.with_vertices(V0))
B = resid_stack(tmpl.with_vertices(V1))
for vi, (a, b) in enumerate(zip(A, B)):
    if vsel is not None and vi != vsel:
        continue
    d = b - a
    tot = d.sum()
    if abs(tot) < 1e-6:
        continue
    print(f"view {vi}: dL={tot:+.6f}")
    ys, xs = np.nonzero(np.abs(d) > 1e-3)
    order = np.argsort(-np.abs(d[ys, xs]))[:14]
    for o in order:
        y, x = ys[o], xs[o]
        print(f"   px({x:2d},{y:2d}) |r| {a[y,x]:+.6f} -> {b[y,x]:+.6f}  d={d[y,x]:+.6f}")
