"""Naive full-image compositor used as the rasterizer oracle.

No tiles: every splat is tested against every pixel, vectorized over the
pixel grid, walking splats in the same global front-to-back order as the
tile path and applying the identical containment test, alpha clamp and
early-termination rule. Forward only.
"""

from __future__ import annotations

import numpy as np

from .kernels import ALPHA_CLAMP, TRANSMITTANCE_MIN


def reference_composite(proj, alphas, colors, width, height, background):
    """Composite projected splats per pixel with a full sorted walk.

    Args:
        proj: ProjectedSplats.
        alphas: (M,) activated opacities aligned with proj rows.
        colors: (M, 3) RGB aligned with proj rows.
        background: (3,) constant background color.
    Returns:
        (image (H, W, 3), alpha (H, W)).
    """
    px = np.arange(width, dtype=np.float64)[None, :]
    py = np.arange(height, dtype=np.float64)[:, None]
    T = np.ones((height, width))
    image = np.zeros((height, width, 3))
    for s in proj.order:
        dx = px - proj.means2d[s, 0]
        dy = py - proj.means2d[s, 1]
        mask = ((np.abs(dx) <= proj.radii[s, 0])
                & (np.abs(dy) <= proj.radii[s, 1])
                & (T >= TRANSMITTANCE_MIN))
        if not mask.any():
            continue
        a, b, c = proj.conics[s]
        q = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
        ap = np.minimum(alphas[s] * np.exp(q), ALPHA_CLAMP)
        w = np.where(mask, T * ap, 0.0)
        image += w[:, :, None] * colors[s]
        T = np.where(mask, T * (1.0 - ap), T)
    image += T[:, :, None] * np.asarray(background, dtype=np.float64)
    return image, 1.0 - T
