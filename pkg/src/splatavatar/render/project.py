"""Screen-space projection of 3D Gaussians.

The 3D covariance R S S^T R^T is pushed through the world-to-camera rotation
and the first-order (EWA) Jacobian of the pinhole projection, then dilated by
an isotropic 0.3 px low-pass term so every projected footprint stays positive
definite. Depths are camera-frame z; splats at or behind the near plane are
culled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# low-pass dilation of the projected covariance, in pixels^2
COV_DILATION = 0.3
# Gaussians are evaluated only inside this many standard deviations
CUTOFF_SIGMA = 3.0


def project_points(camera, points):
    """Pinhole-project world points.

    Returns (uv (N, 2) pixel coords, depth (N,) camera-frame z).
    """
    R, pos = camera.world_to_camera()
    t = (np.asarray(points, dtype=np.float64) - pos) @ R.T
    fx, fy = camera.focal
    cx, cy = camera.principal_point
    z = t[:, 2]
    uv = np.stack([fx * t[:, 0] / z + cx, fy * t[:, 1] / z + cy], axis=1)
    return uv, z


@dataclass
class ProjectedSplats:
    """Struct-of-arrays form of the visible splats after projection.

    ids maps rows back to the input cloud. conics hold the three distinct
    entries (a, b, c) of the inverse 2D covariance [[a, b], [b, c]]; radii
    are the half-extents of the 3-sigma bounding rectangle in pixels.
    """

    ids: np.ndarray          # (M,) indices into the input arrays
    means2d: np.ndarray      # (M, 2) pixel coordinates
    depths: np.ndarray       # (M,)
    cov2d: np.ndarray        # (M, 3) entries (A, B, C) of [[A, B], [B, C]]
    conics: np.ndarray       # (M, 3)
    radii: np.ndarray        # (M, 2)
    # cached intermediates for the backward pass
    t_cam: np.ndarray        # (M, 3) camera-frame positions
    J: np.ndarray            # (M, 2, 3) projection Jacobians
    V: np.ndarray            # (M, 3, 3) camera-frame covariances
    rotmats: np.ndarray      # (M, 3, 3)
    scales: np.ndarray       # (M, 3)

    @property
    def order(self):
        """Global front-to-back order, ties broken by splat index."""
        return np.lexsort((self.ids, self.depths))


def project_gaussians(positions, rotmats, scales, camera):
    """Project 3D Gaussians to screen space.

    Args:
        positions: (N, 3) world means.
        rotmats: (N, 3, 3) rotation factors of the covariance.
        scales: (N, 3) per-axis standard deviations (activated, positive).
        camera: Camera.
    Returns:
        ProjectedSplats covering the splats in front of the near plane.
    """
    positions = np.asarray(positions, dtype=np.float64)
    W, pos = camera.world_to_camera()
    t = (positions - pos) @ W.T
    keep = np.where(t[:, 2] > camera.near)[0]
    t = t[keep]
    rotmats = np.asarray(rotmats, dtype=np.float64)[keep]
    scales = np.asarray(scales, dtype=np.float64)[keep]

    fx, fy = camera.focal
    cx, cy = camera.principal_point
    z = t[:, 2]
    means2d = np.stack([fx * t[:, 0] / z + cx, fy * t[:, 1] / z + cy], axis=1)

    M = len(keep)
    J = np.zeros((M, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * t[:, 0] / z ** 2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * t[:, 1] / z ** 2

    # Sigma_cam = W Sigma W^T with Sigma = R diag(s^2) R^T
    RW = np.einsum("ij,njk->nik", W, rotmats)
    V = np.einsum("nij,nj,nkj->nik", RW, scales ** 2, RW)
    cov_full = np.einsum("nij,njk,nlk->nil", J, V, J)
    A = cov_full[:, 0, 0] + COV_DILATION
    B = cov_full[:, 0, 1]
    C = cov_full[:, 1, 1] + COV_DILATION
    det = A * C - B * B
    conics = np.stack([C / det, -B / det, A / det], axis=1)
    radii = CUTOFF_SIGMA * np.sqrt(np.stack([A, C], axis=1))

    return ProjectedSplats(
        ids=keep, means2d=means2d, depths=z,
        cov2d=np.stack([A, B, C], axis=1), conics=conics, radii=radii,
        t_cam=t, J=J, V=V, rotmats=rotmats, scales=scales,
    )


def project_backward(proj, camera, g_means2d, g_conics):
    """Chain screen-space gradients back to 3D means, rotations and scales.

    Args:
        proj: ProjectedSplats from the forward pass.
        g_means2d: (M, 2) gradient wrt pixel means.
        g_conics: (M, 3) gradient wrt the (a, b, c) conic entries.
    Returns:
        (g_positions (M, 3), g_rotmats (M, 3, 3), g_scales (M, 3)) aligned
        with proj rows; callers scatter through proj.ids.
    """
    W, _ = camera.world_to_camera()
    fx, fy = camera.focal
    t = proj.t_cam
    z = t[:, 2]

    # conic = inv(cov2d): dL/dcov = -conic . dL/dconic_sym . conic
    a, b, c = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 2]
    Mc = np.empty((len(z), 2, 2))
    Mc[:, 0, 0] = a
    Mc[:, 0, 1] = Mc[:, 1, 0] = b
    Mc[:, 1, 1] = c
    Gc = np.empty_like(Mc)
    Gc[:, 0, 0] = g_conics[:, 0]
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * g_conics[:, 1]
    Gc[:, 1, 1] = g_conics[:, 2]
    G2 = -np.einsum("nij,njk,nkl->nil", Mc, Gc, Mc)

    g_V = np.einsum("nji,njk,nkl->nil", proj.J, G2, proj.J)
    g_J = 2.0 * np.einsum("nij,njk,nkl->nil", G2, proj.J, proj.V)

    # uv path: g_t += J^T g_uv; J path: entries of J depend on t
    g_t = np.einsum("nji,nj->ni", proj.J, g_means2d)
    inv_z2 = 1.0 / z ** 2
    g_t[:, 0] += g_J[:, 0, 2] * (-fx * inv_z2)
    g_t[:, 1] += g_J[:, 1, 2] * (-fy * inv_z2)
    g_t[:, 2] += (g_J[:, 0, 0] * (-fx * inv_z2)
                  + g_J[:, 1, 1] * (-fy * inv_z2)
                  + g_J[:, 0, 2] * (2.0 * fx * t[:, 0] / z ** 3)
                  + g_J[:, 1, 2] * (2.0 * fy * t[:, 1] / z ** 3))
    g_positions = g_t @ W

    # Sigma_world = R diag(s^2) R^T, and V = W Sigma W^T
    g_sigma = np.einsum("ji,njk,kl->nil", W, g_V, W)
    D = proj.scales ** 2
    g_rotmats = 2.0 * np.einsum("nij,njk,nk->nik", g_sigma, proj.rotmats, D)
    RtGR = np.einsum("nji,njk,nkl->nil", proj.rotmats, g_sigma, proj.rotmats)
    g_scales = 2.0 * proj.scales * np.einsum("nii->ni", RtGR)
    return g_positions, g_rotmats, g_scales
