import sys
import numpy as np
from _fdcheck import build
from meshreg import losses, raster

level = int(sys.argv[1]); vid = int(sys.argv[2]); axis = int(sys.argv[3])
t0 = float(sys.argv[4]); t1 = float(sys.argv[5])

tmpl, views, light, tex_t = build(level)
print("scan_depth shape:", views.scan_depth[0].shape)

def per_view(m):
    tots = []
    for j, cam in enumerate(views.cameras):
        fb = raster.rasterize(m, cam, views.background_color)
        rec = raster.silhouette_records(fb, m, cam)
        img = raster.blend_image(raster.render_depth(fb), rec, fb, m, "depth")
        r = np.abs(img - views.scan_depth[j])
        tots.append(r.sum())
    return np.asarray(tots)

V0 = tmpl.vertices.copy(); V0[vid, axis] += t0
V1 = tmpl.vertices.copy(); V1[vid, axis] += t1
a = per_view(tmpl.with_vertices(V0))
b = per_view(tmpl.with_vertices(V1))
print("per-view dL:", b - a)
print("total dL:", (b - a).sum(), " over dt:", t1 - t0, " slope:", (b - a).sum() / (t1 - t0))
