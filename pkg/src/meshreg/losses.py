"""Rendering-alignment losses over a set of calibrated views.

Three L1 image losses drive registration: color against reference images
(weighted by the UV-space trust mask), and depth / normal against cached
renders of the target scan.  One constraint is evaluated per iteration,
rotating through the active set, so each step back-propagates a single
rendered quantity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import raster
from .camera import Camera, SHLighting
from .mesh import MaskImage, TextureImage, TriangleMesh

__all__ = ["ViewSet", "LossConfig", "color_loss", "depth_loss",
           "normal_loss", "step_loss", "total_loss", "render_color_view"]


@dataclass
class ViewSet:
    """Cameras with reference images and cached scan renders.

    ``references`` are linear-color (h,w,3) arrays sized per camera;
    ``foreground`` flags reference pixels showing the subject (synthetic
    references carry these exactly).  ``scan_depth`` / ``scan_normal`` are
    renders of the target scan under the same cameras, silhouette-blended
    the same way the losses blend the live renders; they must be rebuilt
    whenever scan or cameras change (``from_scan`` does).
    """

    cameras: list
    references: list
    foreground: list
    scan_depth: list
    scan_normal: list
    light: SHLighting
    background_color: np.ndarray

    def __post_init__(self):
        self.background_color = np.asarray(self.background_color, dtype=np.float64)
        n = len(self.cameras)
        for name in ("references", "foreground", "scan_depth", "scan_normal"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} count does not match cameras")
        for j, cam in enumerate(self.cameras):
            w, h = cam.image_size
            for name in ("references", "foreground", "scan_depth", "scan_normal"):
                img = getattr(self, name)[j]
                if img.shape[:2] != (h, w):
                    raise ValueError(
                        f"view {j}: {name} is {img.shape[:2]}, camera wants {(h, w)}")

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @classmethod
    def from_scan(cls, cameras, scan: TriangleMesh, light: SHLighting,
                  albedo: TextureImage, background_color=(0.0, 0.0, 0.0)) -> "ViewSet":
        """Render references and caches directly from a textured scan."""
        refs, fgs, sds, sns = [], [], [], []
        for cam in cameras:
            fb = raster.rasterize(scan, cam, background_color)
            rec = raster.silhouette_records(fb, scan, cam)
            refs.append(raster.blend_image(
                raster.shade_color(fb, scan, light, albedo), rec, fb, scan,
                "color", light, albedo))
            fgs.append(raster.soft_coverage(fb, rec))
            sds.append(raster.blend_image(raster.render_depth(fb), rec,
                                          fb, scan, "depth"))
            sns.append(raster.blend_image(raster.render_normal(fb, scan),
                                          rec, fb, scan, "normal"))
        return cls(list(cameras), refs, fgs, sds, sns, light,
                   np.asarray(background_color, dtype=np.float64))


@dataclass
class LossConfig:
    """Active constraints, their rotation order, weights, and trust mask."""

    active: tuple = ("color", "depth", "normal")
    rotation: tuple = ("color", "depth", "normal")
    weights: dict = field(default_factory=lambda: {"color": 1.0, "depth": 1.0,
                                                   "normal": 1.0})
    mask: MaskImage | None = None

    def __post_init__(self):
        known = {"color", "depth", "normal"}
        if not set(self.active) <= known:
            raise ValueError(f"unknown constraints in {self.active}")
        if sorted(self.rotation) != sorted(self.active):
            raise ValueError("rotation order must be a permutation of the active set")


def render_color_view(mesh: TriangleMesh, cam: Camera, light: SHLighting,
                      albedo: TextureImage, background_color=(0.0, 0.0, 0.0)) -> np.ndarray:
    """The renderer's color output for one view: shaded, silhouette-blended."""
    fb = raster.rasterize(mesh, cam, background_color)
    rec = raster.silhouette_records(fb, mesh, cam)
    return raster.blend_image(raster.shade_color(fb, mesh, light, albedo),
                              rec, fb, mesh, "color", light, albedo)


def _mask_pixel_weight(fb: raster.FrameBufferSet, mesh: TriangleMesh,
                       mask: MaskImage | None) -> np.ndarray:
    """Per-pixel color-loss weight in {0,1}.

    Background pixels weigh 1 (they carry the silhouette penalty).  A
    covered pixel weighs 1 only when no positively-weighted texel of its
    bilinear albedo footprint is masked out, so counted pixels never read
    masked texels and masked regions are exactly neutral.
    """
    weight = np.ones((fb.height, fb.width), dtype=np.float64)
    if mask is None:
        return weight
    rows, cols = fb.covered()
    if len(rows) == 0:
        return weight
    uv = fb.pixel_uv(mesh)
    t = mask.resolution
    x = uv[:, 0] * t - 0.5
    y = uv[:, 1] * t - 0.5
    c0 = np.clip(np.floor(x), 0, t - 2).astype(np.int64) if t > 1 else np.zeros(len(x), np.int64)
    r0 = np.clip(np.floor(y), 0, t - 2).astype(np.int64) if t > 1 else np.zeros(len(y), np.int64)
    fc = np.clip(x - c0, 0.0, 1.0) if t > 1 else np.zeros_like(x)
    fr = np.clip(y - r0, 0.0, 1.0) if t > 1 else np.zeros_like(y)
    r1 = np.minimum(r0 + 1, t - 1)
    c1 = np.minimum(c0 + 1, t - 1)
    m = mask.weights
    leak = ((1 - fr) * (1 - fc) * (1.0 - m[r0, c0])
            + (1 - fr) * fc * (1.0 - m[r0, c1])
            + fr * (1 - fc) * (1.0 - m[r1, c0])
            + fr * fc * (1.0 - m[r1, c1]))
    weight[rows, cols] = (leak == 0.0).astype(np.float64)
    return weight


def color_loss(mesh: TriangleMesh, views: ViewSet, light: SHLighting,
               albedo: TextureImage, mask: MaskImage | None = None):
    """L1 color difference against references, mask-weighted.

    Counted pixels are the union of rendered coverage and reference
    foreground; the blend band is included, with records sourced from
    mask-gated pixels dropped so masked regions exert no silhouette force.
    Returns (loss, d/d vertices).
    """
    total = 0.0
    grad = np.zeros((mesh.n_vertices, 3), dtype=np.float64)
    for j, cam in enumerate(views.cameras):
        fb = raster.rasterize(mesh, cam, views.background_color)
        rec = raster.silhouette_records(fb, mesh, cam)
        weight = _mask_pixel_weight(fb, mesh, mask)
        if len(rec):
            rec = rec.subset(weight.reshape(-1)[rec.src] == 1.0)
        img = raster.blend_image(raster.shade_color(fb, mesh, light, albedo),
                                 rec, fb, mesh, "color", light, albedo)
        counted = (raster.soft_coverage(fb, rec)
                   | views.foreground[j]).astype(np.float64) * weight
        resid = (img - views.references[j]) * counted[:, :, None]
        total += np.abs(resid).sum()
        upstream = np.sign(resid) * counted[:, :, None]
        gv, _ = raster.backward(fb, mesh, cam, d_color=upstream, light=light,
                                albedo=albedo, color_records=rec)
        grad += gv
    return total, grad


def color_texel_gradient(mesh: TriangleMesh, views: ViewSet, light: SHLighting,
                         albedo: TextureImage, mask: MaskImage | None = None):
    """Color loss and its gradient with respect to the texture texels.

    Geometry is treated as fixed; the counted-pixel rule matches
    color_loss.  Returns (loss, d/d texels).
    """
    total = 0.0
    grad = np.zeros_like(albedo.texels)
    for j, cam in enumerate(views.cameras):
        fb = raster.rasterize(mesh, cam, views.background_color)
        rec = raster.silhouette_records(fb, mesh, cam)
        weight = _mask_pixel_weight(fb, mesh, mask)
        if len(rec):
            rec = rec.subset(weight.reshape(-1)[rec.src] == 1.0)
        img = raster.blend_image(raster.shade_color(fb, mesh, light, albedo),
                                 rec, fb, mesh, "color", light, albedo)
        counted = (raster.soft_coverage(fb, rec)
                   | views.foreground[j]).astype(np.float64) * weight
        resid = (img - views.references[j]) * counted[:, :, None]
        total += np.abs(resid).sum()
        upstream = np.sign(resid) * counted[:, :, None]
        _, gt = raster.backward(fb, mesh, cam, d_color=upstream, light=light,
                                albedo=albedo, color_records=rec)
        grad += gt
    return total, grad


def depth_loss(mesh: TriangleMesh, views: ViewSet):
    """L1 difference of blended depth renders against the cached scan depth.

    Backgrounds store the far-plane constant, so a pixel covered by only
    one of the two renders pays a finite silhouette-mismatch penalty.
    Returns (loss, d/d vertices).
    """
    total = 0.0
    grad = np.zeros((mesh.n_vertices, 3), dtype=np.float64)
    for j, cam in enumerate(views.cameras):
        fb = raster.rasterize(mesh, cam, views.background_color)
        rec = raster.silhouette_records(fb, mesh, cam)
        img = raster.blend_image(raster.render_depth(fb), rec, fb, mesh,
                                 "depth")
        resid = img - views.scan_depth[j]
        total += np.abs(resid).sum()
        gv, _ = raster.backward(fb, mesh, cam, d_depth=np.sign(resid),
                                depth_records=rec)
        grad += gv
    return total, grad


def normal_loss(mesh: TriangleMesh, views: ViewSet):
    """L1 difference of blended normal renders against the cached scan
    normals; background is the zero vector.  Returns (loss, d/d vertices)."""
    total = 0.0
    grad = np.zeros((mesh.n_vertices, 3), dtype=np.float64)
    for j, cam in enumerate(views.cameras):
        fb = raster.rasterize(mesh, cam, views.background_color)
        rec = raster.silhouette_records(fb, mesh, cam)
        img = raster.blend_image(raster.render_normal(fb, mesh), rec, fb,
                                 mesh, "normal")
        resid = img - views.scan_normal[j]
        total += np.abs(resid).sum()
        gv, _ = raster.backward(fb, mesh, cam, d_normal=np.sign(resid),
                                normal_records=rec)
        grad += gv
    return total, grad


def _eval_one(name: str, mesh, views, light, albedo, cfg: LossConfig):
    if name == "color":
        return color_loss(mesh, views, light, albedo, cfg.mask)
    if name == "depth":
        return depth_loss(mesh, views)
    if name == "normal":
        return normal_loss(mesh, views)
    raise ValueError(f"unknown constraint {name!r}")


def step_loss(mesh: TriangleMesh, views: ViewSet, light: SHLighting,
              albedo: TextureImage, cfg: LossConfig, iteration: int):
    """Evaluate the single constraint scheduled for this iteration.

    Returns (loss, d/d vertices, constraint name).  The schedule is a pure
    function of (iteration, config): rotation[iteration mod active count].
    """
    name = cfg.rotation[iteration % len(cfg.rotation)]
    w = cfg.weights.get(name, 1.0)
    loss, grad = _eval_one(name, mesh, views, light, albedo, cfg)
    return w * loss, w * grad, name


def total_loss(mesh: TriangleMesh, views: ViewSet, light: SHLighting,
               albedo: TextureImage, cfg: LossConfig):
    """Weighted sum of all active constraints.  Returns (loss, d/d vertices)."""
    total = 0.0
    grad = np.zeros((mesh.n_vertices, 3), dtype=np.float64)
    for name in cfg.active:
        w = cfg.weights.get(name, 1.0)
        loss, g = _eval_one(name, mesh, views, light, albedo, cfg)
        total += w * loss
        grad += w * g
    return total, grad
