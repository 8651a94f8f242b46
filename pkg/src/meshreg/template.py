"""Template construction: neutral bust, depth-only fit, texture recovery,
and decimation into a coarse textured template."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses, optim, raster, shapes
from .camera import SHLighting
from .decimate import decimate_preserve_uv
from .mesh import MaskImage, TextureImage, TriangleMesh


@dataclass
class TemplateBundle:
    """Coarse template mesh with its texture and trust mask.

    The mesh must carry a UV atlas; texture and mask share one resolution
    and parametrization."""

    mesh: TriangleMesh
    texture: TextureImage
    mask: MaskImage

    def __post_init__(self):
        if not self.mesh.has_uvs:
            raise ValueError("template mesh needs a UV atlas")
        if self.texture.resolution != self.mask.resolution:
            raise ValueError("texture and mask resolutions differ")


def make_bust(seed: int = 0, rings: int = 20, segments: int = 26) -> TriangleMesh:
    """Neutral genus-0 starting shape with the standard atlas."""
    return shapes.bust(seed, rings=rings, segments=segments)


def default_fit_config() -> optim.RegistrationConfig:
    """Schedule for depth-only template fitting: shorter than full
    registration, ending densely tessellated."""
    return optim.RegistrationConfig(phases=[
        optim.Phase(200.0, 150, remesh_before=False),
        optim.Phase(120.0, 150, remesh_before=True),
        optim.Phase(80.0, 200, remesh_before=True),
        optim.Phase(50.0, 200, remesh_before=True),
    ])


def fit_depth_only(bust: TriangleMesh, views: losses.ViewSet,
                   cfg: optim.RegistrationConfig | None = None):
    """Deform the bust to the scan using the depth constraint alone.

    Color references are never read; lighting and texture are irrelevant
    here and passed as neutral placeholders.  Returns (mesh, log).
    """
    cfg = cfg or default_fit_config()
    loss_cfg = losses.LossConfig(active=("depth",), rotation=("depth",))
    light = SHLighting(np.zeros((9, 3)))
    albedo = TextureImage.constant(4)
    return optim.run_registration(bust, views, light, albedo, cfg=cfg,
                                  loss_cfg=loss_cfg)


def texture_coverage(mesh: TriangleMesh, views: losses.ViewSet,
                     albedo: TextureImage) -> np.ndarray:
    """Boolean (t, t) map of texels that influence some rendered pixel."""
    light = views.light
    covered = np.zeros(albedo.texels.shape[:2], dtype=bool)
    for j, cam in enumerate(views.cameras):
        fb = raster.rasterize(mesh, cam, views.background_color)
        rec = raster.silhouette_records(fb, mesh, cam)
        ones = np.ones((cam.height, cam.width, 3))
        _, gt = raster.backward(fb, mesh, cam, d_color=ones, light=light,
                                albedo=albedo, color_records=rec)
        covered |= np.abs(gt).sum(axis=2) > 0.0
    return covered


def _flood_fill(texels: np.ndarray, covered: np.ndarray) -> np.ndarray:
    """Assign each uncovered texel the value of its nearest covered one
    (breadth-first over the 4-neighborhood, deterministic order)."""
    if not covered.any():
        raise ValueError("no texel is covered by any view")
    out = texels.copy()
    frontier = list(zip(*np.nonzero(covered)))
    seen = covered.copy()
    t = texels.shape[0]
    while frontier:
        nxt = []
        for r, c in frontier:
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= rr < t and 0 <= cc < t and not seen[rr, cc]:
                    seen[rr, cc] = True
                    out[rr, cc] = out[r, c]
                    nxt.append((rr, cc))
        frontier = nxt
    return out


def recover_texture(mesh: TriangleMesh, views: losses.ViewSet,
                    light: SHLighting, iterations: int = 500,
                    step: float = 0.5, resolution: int = 128,
                    mask: MaskImage | None = None,
                    init: TextureImage | None = None) -> TextureImage:
    """Recover the template texture by descending the color loss on texels.

    Geometry stays fixed.  The per-texel objective is piecewise linear, so
    updates move each texel by a decaying value-unit step against the
    gradient sign; the decay shrinks the final oscillation to ~1e-3.
    Texels no view ever touches are filled from their nearest covered
    neighbor afterwards.
    """
    tex = (init or TextureImage.constant(resolution, (0.5, 0.5, 0.5))).copy()
    covered = texture_coverage(mesh, views, tex)
    for t in range(iterations):
        _, gt = losses.color_texel_gradient(mesh, views, light, tex, mask)
        tex.texels -= (step * 0.99 ** t) * np.sign(gt)
        np.clip(tex.texels, 0.0, 1.0, out=tex.texels)
    tex.texels[:] = _flood_fill(tex.texels, covered)
    return tex


def build_template(bust: TriangleMesh, views: losses.ViewSet,
                   light: SHLighting,
                   fit_cfg: optim.RegistrationConfig | None = None,
                   target_vertex_count: int = 400,
                   texture_resolution: int = 128,
                   texture_iterations: int = 500,
                   mask: MaskImage | None = None) -> TemplateBundle:
    """Full pipeline: depth-only fit, texture recovery, decimation.

    Decimation happens after texture recovery and only rewires geometry;
    the texture object is shared, not copied, so the bundle's texture is
    the recovered one by identity.  The mask defaults to all-ones.
    """
    fitted, _ = fit_depth_only(bust, views, cfg=fit_cfg)
    texture = recover_texture(fitted, views, light,
                              iterations=texture_iterations,
                              resolution=texture_resolution, mask=mask)
    coarse = decimate_preserve_uv(fitted, target_vertex_count)
    return TemplateBundle(mesh=coarse, texture=texture,
                          mask=mask or MaskImage.ones(texture_resolution))
