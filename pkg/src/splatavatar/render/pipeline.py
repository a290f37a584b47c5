"""End-to-end differentiable rendering of Gaussian sets.

render_gaussians is the core entry point: it takes already-activated splat
attributes (rotation matrices, positive scales, opacities in (0, 1)) so the
same path serves canonical clouds and pose-deformed ones. cloud_render_inputs
and chain_cloud_grads wrap the raw SplatCloud parameterization (quaternions,
log scales, opacity logits) around it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import quat_to_rotmat, quat_to_rotmat_backward, sigmoid
from . import kernels
from .project import project_backward, project_gaussians
from .reference import reference_composite


@dataclass
class GaussianGrads:
    """Gradients wrt the activated splat attributes, full-cloud shaped.

    view_grad_norm is the screen-space mean gradient magnitude in NDC units
    (pixel gradients scaled by width/2 and height/2), the densification
    signal. touched flags splats that contributed to at least one pixel with
    a nonzero incoming gradient.
    """

    positions: np.ndarray    # (N, 3)
    rotations: np.ndarray    # (N, 3, 3)
    scales: np.ndarray       # (N, 3)
    opacities: np.ndarray    # (N,)
    colors: np.ndarray       # (N, 3)
    view_grad_norm: np.ndarray  # (N,)
    touched: np.ndarray      # (N,) bool


class RenderResult:
    """Rendered image plus the cached state needed for the backward pass."""

    def __init__(self, image, alpha, camera, proj, alphas, colors_in,
                 tile_ptr, tile_ids, n_total):
        self.image = image
        self.alpha = alpha
        self._camera = camera
        self._proj = proj
        self._alphas = alphas
        self._colors = colors_in
        self._tile_ptr = tile_ptr
        self._tile_ids = tile_ids
        self._n_total = n_total

    def backward(self, dL_dimage):
        """Propagate an image gradient to the activated splat attributes."""
        if self._tile_ptr is None:
            raise ValueError("backward requires a tile-path render")
        dL_dimage = np.ascontiguousarray(dL_dimage, dtype=np.float64)
        if dL_dimage.shape != self.image.shape:
            raise ValueError("gradient shape does not match the image")
        proj = self._proj
        camera = self._camera
        M = len(proj.ids)
        g_means2d = np.zeros((M, 2))
        g_conics = np.zeros((M, 3))
        g_alphas_vis = np.zeros(M)
        g_colors_vis = np.zeros((M, 3))
        touched_vis = np.zeros(M, dtype=np.bool_)
        kernels.composite_backward(
            proj.means2d, proj.conics, proj.radii, self._alphas, self._colors,
            self._tile_ptr, self._tile_ids, camera.width, camera.height,
            self.image, dL_dimage,
            g_means2d, g_conics, g_alphas_vis, g_colors_vis, touched_vis)
        g_pos_vis, g_rot_vis, g_scale_vis = project_backward(
            proj, camera, g_means2d, g_conics)

        n = self._n_total
        grads = GaussianGrads(
            positions=np.zeros((n, 3)), rotations=np.zeros((n, 3, 3)),
            scales=np.zeros((n, 3)), opacities=np.zeros(n),
            colors=np.zeros((n, 3)), view_grad_norm=np.zeros(n),
            touched=np.zeros(n, dtype=np.bool_))
        ids = proj.ids
        grads.positions[ids] = g_pos_vis
        grads.rotations[ids] = g_rot_vis
        grads.scales[ids] = g_scale_vis
        grads.opacities[ids] = g_alphas_vis
        grads.colors[ids] = g_colors_vis
        ndc = np.hypot(g_means2d[:, 0] * camera.width / 2.0,
                       g_means2d[:, 1] * camera.height / 2.0)
        grads.view_grad_norm[ids] = ndc
        grads.touched[ids] = touched_vis
        return grads


def render_gaussians(positions, rotations, scales, opacities, colors, camera,
                     background=(0.0, 0.0, 0.0), method="tile"):
    """Render activated Gaussians.

    Args:
        positions: (N, 3) world means.
        rotations: (N, 3, 3) rotation matrices.
        scales: (N, 3) positive per-axis standard deviations.
        opacities: (N,) in (0, 1).
        colors: (N, 3) RGB.
        method: "tile" (differentiable fast path) or "reference" (oracle).
    Returns:
        RenderResult; backward() is available on the tile path.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n_total = positions.shape[0]
    background = np.asarray(background, dtype=np.float64)
    proj = project_gaussians(positions, rotations, scales, camera)
    alphas = np.ascontiguousarray(np.asarray(opacities, dtype=np.float64)[proj.ids])
    colors_vis = np.ascontiguousarray(np.asarray(colors, dtype=np.float64)[proj.ids])

    H, W = camera.height, camera.width
    if method == "reference":
        image, alpha = reference_composite(proj, alphas, colors_vis, W, H,
                                           background)
        return RenderResult(image, alpha, camera, proj, alphas, colors_vis,
                            None, None, n_total)
    if method != "tile":
        raise ValueError(f"unknown render method: {method!r}")
    order = proj.order
    tile_ptr, tile_ids = kernels.bin_splats(proj.means2d, proj.radii, order,
                                            W, H)
    image = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    kernels.composite_forward(proj.means2d, proj.conics, proj.radii, alphas,
                              colors_vis, tile_ptr, tile_ids, W, H,
                              background, image, alpha)
    return RenderResult(image, alpha, camera, proj, alphas, colors_vis,
                        tile_ptr, tile_ids, n_total)


def cloud_render_inputs(cloud):
    """Activated attribute arrays for a SplatCloud.

    Returns (positions, rotmats, scales, opacities, colors).
    """
    return (cloud.positions, quat_to_rotmat(cloud.rotations),
            np.exp(cloud.log_scales), sigmoid(cloud.opacity_logits),
            cloud.colors)


def chain_cloud_grads(cloud, grads):
    """Map GaussianGrads back through the SplatCloud activations.

    Returns a dict keyed by the raw parameter names: positions, rotations
    (quaternions), log_scales, opacity_logits, colors.
    """
    scales = np.exp(cloud.log_scales)
    alphas = sigmoid(cloud.opacity_logits)
    return {
        "positions": grads.positions,
        "rotations": quat_to_rotmat_backward(cloud.rotations, grads.rotations),
        "log_scales": grads.scales * scales,
        "opacity_logits": grads.opacities * alphas * (1.0 - alphas),
        "colors": grads.colors,
    }
