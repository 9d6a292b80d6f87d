"""Gaussian splatting scenes augmented with view-dependent opacity lobes."""

from .camera import Camera, Rotation, pixel_to_world, project_covariance, world_to_pixel
from .config import PipelineConfig, load_config
from .primitives import EnhancedGaussian, Gaussian2D, Gaussian3D, GaussianCloud, OpacityLobe, lobe_opacity
from .render import backward_2d, backward_3d, render_2d, render_3d

__version__ = "0.1.0"

__all__ = [
    "Camera", "Rotation", "pixel_to_world", "project_covariance", "world_to_pixel",
    "PipelineConfig", "load_config",
    "EnhancedGaussian", "Gaussian2D", "Gaussian3D", "GaussianCloud", "OpacityLobe", "lobe_opacity",
    "backward_2d", "backward_3d", "render_2d", "render_3d",
]
