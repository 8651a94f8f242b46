import sys
import numpy as np
from _fdcheck import build
from meshreg import losses

level = int(sys.argv[1]) if len(sys.argv) > 1 else 0
vid = int(sys.argv[2]) if len(sys.argv) > 2 else 9
axis = int(sys.argv[3]) if len(sys.argv) > 3 else 1
kind = sys.argv[4] if len(sys.argv) > 4 else "depth"

tmpl, views, light, tex_t = build(level)
diag = tmpl.bbox_diagonal()
h = 1e-3 * diag

def loss_and_grad(m):
    if kind == "depth":
        return losses.depth_loss(m, views)
    if kind == "normal":
        return losses.normal_loss(m, views)
    return losses.color_loss(m, views, light, tex_t, None)

L0, g = loss_and_grad(tmpl)
print(f"analytic g[{vid},{axis}] = {g[vid, axis]:.6f}   L0={L0:.6f}")

ts = np.linspace(-h, h, 41)
vals = []
for t in ts:
    V = tmpl.vertices.copy()
    V[vid, axis] += t
    L, _ = loss_and_grad(tmpl.with_vertices(V))
    vals.append(L)
vals = np.asarray(vals)
slopes = np.diff(vals) / np.diff(ts)
print("pairwise slopes over [-h, h]:")
for i, s in enumerate(slopes):
    mark = ""
    if i > 0 and abs(s - slopes[i - 1]) > 0.05 * max(abs(s), abs(slopes[i - 1]), 1.0):
        mark = "  <-- kink/jump"
    print(f"  t=[{ts[i]:+.3e},{ts[i+1]:+.3e}] slope={s:+.4f}{mark}")
fd = (vals[-1] - vals[0]) / (ts[-1] - ts[0])
print(f"window FD = {fd:+.6f}  vs analytic {g[vid, axis]:+.6f}")
# fine probe around t=0 for the local slope
eps = h * 1e-3
Ls = []
for t in (-eps, 0.0, eps):
    V = tmpl.vertices.copy()
    V[vid, axis] += t
    L, _ = loss_and_grad(tmpl.with_vertices(V))
    Ls.append(L)
print(f"local slope at 0: left={(Ls[1]-Ls[0])/eps:+.6f} right={(Ls[2]-Ls[1])/eps:+.6f}")
