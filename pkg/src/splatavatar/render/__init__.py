from .project import ProjectedSplats, project_gaussians, project_points
from .pipeline import (GaussianGrads, RenderResult, cloud_render_inputs,
                       chain_cloud_grads, render_gaussians)
from .reference import reference_composite
from .poseimg import render_pose_image

__all__ = [
    "ProjectedSplats", "project_gaussians", "project_points",
    "GaussianGrads", "RenderResult", "render_gaussians",
    "cloud_render_inputs", "chain_cloud_grads",
    "reference_composite", "render_pose_image",
]
