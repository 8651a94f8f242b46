import sys
import numpy as np
from _fdcheck import build
from meshreg import raster

level = int(sys.argv[1]); vid = int(sys.argv[2]); axis = int(sys.argv[3])
view_j = int(sys.argv[4]); px = int(sys.argv[5]); py = int(sys.argv[6])
t0 = float(sys.argv[7]); t1 = float(sys.argv[8])
n = int(sys.argv[9]) if len(sys.argv) > 9 else 9

tmpl, views, light, tex_t = build(level)
cam = views.cameras[view_j]
pid = py * 64 + px
ref = views.scan_depth[view_j][py, px]
print(f"pixel ({px},{py}) flat={pid}  ref={ref:.6f}")

for t in np.linspace(t0, t1, n):
    V = tmpl.vertices.copy()
    V[vid, axis] += t
    m = tmpl.with_vertices(V)
    fb = raster.rasterize(m, cam, views.background_color)
    rec = raster.silhouette_records(fb, m, cam)
    img = raster.blend_image(raster.render_depth(fb), rec, fb, m, "depth")
    rows = np.nonzero(rec.dst == pid)[0]
    hard = raster.render_depth(fb)[py, px]
    desc = []
    vals = raster.record_values(rec, fb, m, "depth", raster.render_depth(fb))
    eff, _, _ = raster._blend_weights(rec, 64 * 64)
    for r in rows:
        plus = "+" if rec.slope[r] > 0 else "-"
        nsub = int((rec.subs.rec == r).sum())
        desc.append(f"[{plus} src={rec.src[r]} tri={rec.tri[r]} s={rec.s[r]:.4f} "
                    f"a={rec.alpha[r]:.4f} eff={eff[r]:.4f} v={vals[r,0]:.4f} subs={nsub}]")
    print(f"t={t:+.6e} hard={hard:.4f} blended={img[py,px]:.6f} |r|={abs(img[py,px]-ref):.6f} {' '.join(desc)}")
