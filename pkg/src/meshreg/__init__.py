"""meshreg: multiview template-to-scan mesh registration by differentiable
rasterization, with smoothness-preconditioned descent and coarse-to-fine
refinement."""

from .camera import Camera, SHLighting
from .decimate import decimate_preserve_uv
from .laplacian import cotangent_laplacian
from .losses import (LossConfig, ViewSet, color_loss, color_texel_gradient,
                     depth_loss, normal_loss, step_loss, total_loss)
from .mesh import (MaskImage, TextureImage, TriangleMesh, validate,
                   vertex_normals)
from .metrics import (GeoReport, ImgReport, chamfer_l1, evaluate_geometry,
                      f_score, normal_consistency, point_to_mesh_distance,
                      psnr, ssim)
from .objio import load_obj, save_obj
from .optim import (LaplacianPrecond, OptState, Phase, RegistrationConfig,
                    build_precond, run_registration, set_eta, step)
from .refine import remesh_refine
from .scene import SceneBundle, SceneConfig, load_scene, make_scene
from .shapes import BlobParams, blob_expression, blob_head, bust, globe_mesh
from .template import (TemplateBundle, build_template, fit_depth_only,
                       make_bust, recover_texture)

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "SHLighting",
    "decimate_preserve_uv",
    "cotangent_laplacian",
    "LossConfig",
    "ViewSet",
    "color_loss",
    "color_texel_gradient",
    "depth_loss",
    "normal_loss",
    "step_loss",
    "total_loss",
    "MaskImage",
    "TextureImage",
    "TriangleMesh",
    "validate",
    "vertex_normals",
    "GeoReport",
    "ImgReport",
    "chamfer_l1",
    "evaluate_geometry",
    "f_score",
    "normal_consistency",
    "point_to_mesh_distance",
    "psnr",
    "ssim",
    "load_obj",
    "save_obj",
    "LaplacianPrecond",
    "OptState",
    "Phase",
    "RegistrationConfig",
    "build_precond",
    "run_registration",
    "set_eta",
    "step",
    "remesh_refine",
    "SceneBundle",
    "SceneConfig",
    "load_scene",
    "make_scene",
    "BlobParams",
    "blob_expression",
    "blob_head",
    "bust",
    "globe_mesh",
    "TemplateBundle",
    "build_template",
    "fit_depth_only",
    "make_bust",
    "recover_texture",
    "__version__",
]
