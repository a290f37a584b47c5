"""Pose-deformable Gaussian-splat avatars optimized by score distillation."""

__version__ = "0.1.0"

from .model import Camera, Pose, RiggedTemplate, SplatCloud, init_cloud_from_template

__all__ = [
    "Camera",
    "Pose",
    "RiggedTemplate",
    "SplatCloud",
    "init_cloud_from_template",
    "__version__",
]
