import sys
import numpy as np
from _fdcheck import build
from meshreg import losses

level = int(sys.argv[1]); vid = int(sys.argv[2]); axis = int(sys.argv[3])
kind = sys.argv[4]
ts = [float(x) for x in sys.argv[5:]]

tmpl, views, light, tex_t = build(level)

def loss_and_grad(m):
    if kind == "depth":
        return losses.depth_loss(m, views)
    if kind == "normal":
        return losses.normal_loss(m, views)
    return losses.color_loss(m, views, light, tex_t, None)

for t in ts:
    V = tmpl.vertices.copy()
    V[vid, axis] += t
    L, g = loss_and_grad(tmpl.with_vertices(V))
    print(f"t={t:+.8e}  L={L:.9f}  analytic={g[vid, axis]:+.6f}")
