"""Scene configuration, synthetic scene generation, and scene loading.

A scene on disk is one directory: a JSON config, the scan mesh, its
texture, and per-view reference images plus cached depth/normal renders.
Everything is produced deterministically from the config, so a directory
can be regenerated bit-identically from its own scene.json.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio, losses, objio, raster, shapes
from .camera import Camera, SHLighting
from .mesh import TextureImage, TriangleMesh


@dataclass
class SceneConfig:
    """Declarative description of a synthetic scene.

    ``generator`` either names a procedural subject
    ({"kind": "procedural", "name", "seed", "expression"}) or points at a
    mesh file ({"kind": "file", "path"}).  ``texture`` follows the same
    pattern with {"kind": "procedural", "seed", "resolution"} or a file.
    Cameras are stored in look-at form; rotation and translation follow
    from (eye, target, up).
    """

    name: str
    generator: dict
    texture: dict
    cameras: list
    lighting: list
    background_color: tuple = (0.0, 0.0, 0.0)
    units: str = "dimensionless scene units"
    # None renders references from the scan; {"kind": "two_band", ...}
    # synthesizes per-view two-band constant images instead (gradient
    # fixtures want references whose content never moves with any mesh).
    references: dict | None = None

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("scene needs at least one camera")
        light = np.asarray(self.lighting, dtype=np.float64)
        if light.shape != (9, 3):
            raise ValueError("lighting must be 9x3 SH coefficients")
        for i, c in enumerate(self.cameras):
            missing = {"eye", "target", "up", "focal_px", "image_size",
                       "near", "far"} - set(c)
            if missing:
                raise ValueError(f"camera {i} missing fields {sorted(missing)}")

    def to_json(self) -> str:
        payload = {
            "name": self.name,
            "generator": self.generator,
            "texture": self.texture,
            "cameras": self.cameras,
            "lighting": np.asarray(self.lighting, dtype=np.float64).tolist(),
            "background_color": list(self.background_color),
            "units": self.units,
        }
        if self.references is not None:
            payload["references"] = self.references
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneConfig":
        d = json.loads(text)
        return cls(name=d["name"], generator=d["generator"],
                   texture=d["texture"], cameras=d["cameras"],
                   lighting=d["lighting"],
                   background_color=tuple(d.get("background_color",
                                                (0.0, 0.0, 0.0))),
                   units=d.get("units", "dimensionless scene units"),
                   references=d.get("references"))


def build_camera(c: dict) -> Camera:
    return Camera.look_at(eye=np.asarray(c["eye"], dtype=np.float64),
                          target=np.asarray(c["target"], dtype=np.float64),
                          up=np.asarray(c["up"], dtype=np.float64),
                          focal_px=float(c["focal_px"]),
                          image_size=tuple(c["image_size"]),
                          near=float(c["near"]), far=float(c["far"]))


def camera_rig(mesh: TriangleMesh, count: int = 6,
               image_size: tuple = (256, 256)) -> list:
    """Frontal and side cameras on a ring around the subject.

    Azimuth 0 looks down -z at the subject's front (+z); the rig spreads
    views across roughly 190 degrees with small elevation changes, which
    matches the frontal/side coverage the losses are designed for.
    """
    if not 1 <= count <= 12:
        raise ValueError("rig supports 1..12 cameras")
    center = mesh.vertices.mean(axis=0)
    radius = float(np.linalg.norm(mesh.vertices - center, axis=1).max())
    dist = 4.6 * radius
    focal = 0.5 * image_size[0] * dist / (1.45 * radius)
    azimuths = np.linspace(-95, 95, count) * np.pi / 180.0
    elevations = np.array([8, -9, 17, -13, 5, 20, -4, 12, -16, 9, 2, 14])
    elevations = elevations[:count] * np.pi / 180.0
    cams = []
    for az, el in zip(azimuths, elevations):
        direction = np.array([np.sin(az) * np.cos(el), np.sin(el),
                              np.cos(az) * np.cos(el)])
        eye = center + dist * direction
        cams.append({
            "eye": eye.tolist(),
            "target": center.tolist(),
            "up": [0.0, 1.0, 0.0],
            "focal_px": float(focal),
            "image_size": list(image_size),
            "near": float(0.1 * radius),
            "far": float(dist + 3.0 * radius),
        })
    return cams


def blob_scene_config(subject_seed: int, expression: int,
                      image_size: tuple = (256, 256),
                      count: int = 6, texture_seed: int | None = None,
                      name: str | None = None) -> SceneConfig:
    """Standard synthetic fixture: one blob-head expression, ring rig,
    soft three-band lighting, black background."""
    scan = shapes.blob_head(shapes.blob_expression(subject_seed, expression))
    light = np.zeros((9, 3))
    light[0] = 1.55
    light[1] = (0.18, 0.16, 0.14)
    light[2] = (0.28, 0.30, 0.32)
    light[3] = (0.10, 0.12, 0.11)
    return SceneConfig(
        name=name or f"blob-s{subject_seed}-e{expression}",
        generator={"kind": "procedural", "name": "blob-head",
                   "seed": subject_seed, "expression": expression},
        texture={"kind": "procedural",
                 "seed": subject_seed if texture_seed is None
                 else texture_seed,
                 "resolution": 128},
        cameras=camera_rig(scan, count=count, image_size=image_size),
        lighting=light.tolist(),
    )


def _resolve_scan(cfg: SceneConfig, base: Path) -> TriangleMesh:
    g = cfg.generator
    if g.get("kind") == "file":
        return objio.load_obj(base / g["path"])
    return shapes.generate(g["name"], g["seed"],
                           expression=g.get("expression", 0))


def _resolve_texture(cfg: SceneConfig, base: Path) -> TextureImage:
    t = cfg.texture
    if t.get("kind") == "file":
        return TextureImage(np.asarray(imgio.load_pfm(base / t["path"]),
                                       dtype=np.float64))
    return shapes.procedural_texture(t.get("resolution", 128), t["seed"],
                                     t.get("low", 0.1), t.get("high", 0.9))


def make_scene(cfg: SceneConfig, out_dir) -> Path:
    """Generate and write a complete scene directory; returns its path.

    Per view j: view{j:02d}_color.png (display encoding) and .pfm (linear,
    what the losses consume), a foreground mask PNG, and depth/normal PFM
    caches.  Every camera must actually see the scan; an empty render
    aborts with the camera index.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scan = _resolve_scan(cfg, out)
    albedo = _resolve_texture(cfg, out)
    light = SHLighting(np.asarray(cfg.lighting, dtype=np.float64))
    bg = np.asarray(cfg.background_color, dtype=np.float64)

    (out / "scene.json").write_text(cfg.to_json() + "\n")
    objio.save_obj(scan, out / "scan.obj")
    imgio.save_pfm(out / "texture.pfm", albedo.texels)
    imgio.save_png(out / "texture.png", imgio.srgb_encode(albedo.texels))

    for j, cdict in enumerate(cfg.cameras):
        cam = build_camera(cdict)
        fb = raster.rasterize(scan, cam, bg)
        if not fb.coverage.any():
            raise ValueError(f"camera {j} does not see the scan "
                             f"(empty coverage)")
        rec = raster.silhouette_records(fb, scan, cam)
        color = raster.blend_image(
            raster.shade_color(fb, scan, light, albedo), rec, fb, scan,
            "color", light, albedo)
        depth = raster.blend_image(raster.render_depth(fb), rec, fb, scan,
                                   "depth")
        normal = raster.blend_image(raster.render_normal(fb, scan), rec, fb,
                                    scan, "normal")
        fg = raster.soft_coverage(fb, rec)
        imgio.save_pfm(out / f"view{j:02d}_color.pfm", color)
        imgio.save_png(out / f"view{j:02d}_color.png",
                       imgio.srgb_encode(np.clip(color, 0.0, 1.0)))
        imgio.save_png(out / f"view{j:02d}_foreground.png",
                       fg.astype(np.float64))
        imgio.save_pfm(out / f"view{j:02d}_depth.pfm", depth)
        imgio.save_pfm(out / f"view{j:02d}_normal.pfm", normal)
    return out


@dataclass
class SceneBundle:
    """A loaded scene: the scan, its texture and lighting, and the per-view
    data the losses consume."""

    config: SceneConfig
    scan: TriangleMesh
    albedo: TextureImage
    light: SHLighting
    views: losses.ViewSet
    root: Path


def load_scene(scene_dir) -> SceneBundle:
    """Read a directory written by make_scene back into memory."""
    root = Path(scene_dir)
    cfg = SceneConfig.from_json((root / "scene.json").read_text())
    scan = objio.load_obj(root / "scan.obj")
    albedo = TextureImage(np.asarray(imgio.load_pfm(root / "texture.pfm"),
                                     dtype=np.float64))
    light = SHLighting(np.asarray(cfg.lighting, dtype=np.float64))
    cams, refs, fgs, sds, sns = [], [], [], [], []
    for j in range(len(cfg.cameras)):
        cams.append(build_camera(cfg.cameras[j]))
        refs.append(np.asarray(imgio.load_pfm(root / f"view{j:02d}_color.pfm"),
                               dtype=np.float64))
        fg = imgio.load_png(root / f"view{j:02d}_foreground.png")
        if fg.ndim == 3:
            fg = fg[:, :, 0]
        fgs.append(fg > 0.5)
        if not fgs[-1].any():
            raise ValueError(f"view {j}: empty foreground mask")
        sds.append(np.asarray(imgio.load_pfm(root / f"view{j:02d}_depth.pfm"),
                              dtype=np.float64))
        sns.append(np.asarray(imgio.load_pfm(root / f"view{j:02d}_normal.pfm"),
                              dtype=np.float64))
    views = losses.ViewSet(cams, refs, fgs, sds, sns, light,
                           np.asarray(cfg.background_color, dtype=np.float64))
    return SceneBundle(config=cfg, scan=scan, albedo=albedo, light=light,
                       views=views, root=root)
