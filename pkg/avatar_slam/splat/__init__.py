from .avatar import AvatarGaussians, deform_avatar
from .density import DensifyConfig, DensifyResult, GradientStats, densify_and_prune
from .gaussians import CameraState, Gaussians3D, merge
from .io import (
    gaussian_arrays,
    gaussians_from_arrays,
    load_depth_grid,
    load_map,
    load_png,
    save_depth_grid,
    save_map,
    save_png,
)
from .rasterizer import RenderOutput, ndc_gradient_norm, render, render_backward
from .seeding import seed_avatar, seed_scene_from_depth

__all__ = [
    "AvatarGaussians",
    "CameraState",
    "DensifyConfig",
    "DensifyResult",
    "Gaussians3D",
    "GradientStats",
    "RenderOutput",
    "deform_avatar",
    "densify_and_prune",
    "gaussian_arrays",
    "gaussians_from_arrays",
    "load_depth_grid",
    "load_map",
    "load_png",
    "merge",
    "ndc_gradient_norm",
    "render",
    "render_backward",
    "save_depth_grid",
    "save_map",
    "save_png",
    "seed_avatar",
    "seed_scene_from_depth",
]
