"""Kinematic chains, bone transforms and linear blend skinning of splats.

Bone b's chain transform A_b is the ordered product of per-joint blocks
[R(omega_i) | d_i; 0 1] from the root down to b, where d_i is joint i's rest
offset from its parent. The canonical-to-observed map is
B_b = A_b(theta_obs) A_b(theta_c)^-1. A splat deforms by the weight-blended
4x4 T = sum_b w_b B_b; its rotation is re-orthonormalized with a polar
projection because a blended T is not exactly rigid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mlp as mlpmod
from . import spatial

WEIGHT_FLOOR = 1e-6


def rodrigues(omega):
    """Axis-angle (3,) or (N, 3) to rotation matrices, stable near zero."""
    omega = np.asarray(omega, dtype=np.float64)
    single = omega.ndim == 1
    if single:
        omega = omega[None]
    theta2 = np.sum(omega * omega, axis=1)
    theta = np.sqrt(theta2)
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - theta2 / 24.0,
                     (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    wx, wy, wz = omega[:, 0], omega[:, 1], omega[:, 2]
    zeros = np.zeros_like(wx)
    K = np.stack([
        np.stack([zeros, -wz, wy], axis=1),
        np.stack([wz, zeros, -wx], axis=1),
        np.stack([-wy, wx, zeros], axis=1),
    ], axis=1)
    K2 = K @ K
    R = np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * K2
    return R[0] if single else R


def _rigid_inverse(T):
    """Inverse of a rigid 4x4 (or batch)."""
    single = T.ndim == 2
    if single:
        T = T[None]
    R = T[:, :3, :3]
    t = T[:, :3, 3]
    out = np.zeros_like(T)
    Rt = np.swapaxes(R, 1, 2)
    out[:, :3, :3] = Rt
    out[:, :3, 3] = -np.einsum("nij,nj->ni", Rt, t)
    out[:, 3, 3] = 1.0
    return out[0] if single else out


def chain_transforms(template, pose):
    """Per-joint world transforms A_b (B, 4, 4) for a pose.

    The root translation is applied last, translating the whole figure.
    """
    B = template.n_joints
    if pose.n_joints != B:
        raise ValueError(f"pose has {pose.n_joints} joints, template {B}")
    R = rodrigues(pose.joint_rotations)
    rest = template.joint_rest_positions
    parent = template.parent_index
    A = np.zeros((B, 4, 4))
    for b in range(B):
        local = np.eye(4)
        local[:3, :3] = R[b]
        if parent[b] < 0:
            local[:3, 3] = rest[b]
            A[b] = local
        else:
            local[:3, 3] = rest[b] - rest[parent[b]]
            A[b] = A[parent[b]] @ local
    A[:, :3, 3] += pose.root_translation
    return A


def posed_joint_positions(template, pose):
    """World positions of all joints under a pose."""
    return chain_transforms(template, pose)[:, :3, 3].copy()


@dataclass
class BoneTransformSet:
    """Chain transforms for the observed pose and canonical->observed maps."""

    chain: np.ndarray  # (B, 4, 4) A_b at theta_obs
    relative: np.ndarray  # (B, 4, 4) B_b

    def validate(self, tol=1e-6):
        for M in (self.chain, self.relative):
            R = M[:, :3, :3]
            err = np.abs(np.einsum("nij,nkj->nik", R, R) - np.eye(3)[None]).max()
            if err > tol:
                raise ValueError(f"rotation block not orthonormal (err {err:.2e})")
            if np.any(np.linalg.det(R) < 0):
                raise ValueError("rotation block has negative determinant")
            if np.abs(M[:, 3, :] - np.array([0.0, 0.0, 0.0, 1.0])).max() > tol:
                raise ValueError("bottom row must be (0,0,0,1)")
        return self


def bone_transforms(template, pose_obs):
    """B_b = A_b(theta_obs) A_b(theta_c)^-1 for every bone."""
    A_obs = chain_transforms(template, pose_obs)
    A_can = chain_transforms(template, template.canonical_pose)
    rel = A_obs @ _rigid_inverse(A_can)
    return BoneTransformSet(chain=A_obs, relative=rel)


def polar_rotation(M):
    """Closest rotation (proper, det +1) to each 3x3 matrix in the batch."""
    U, _, Vt = np.linalg.svd(M)
    det = np.linalg.det(U @ Vt)
    D = np.ones((M.shape[0], 3))
    D[:, 2] = np.sign(det)
    return (U * D[:, None, :]) @ Vt


def polar_backward(M, Q, dL_dQ):
    """Gradient of the polar rotation factor wrt the input matrices.

    With M = Q S (S symmetric), a perturbation dM rotates Q by [omega]_x
    where (tr(S) I - S) omega = vec(Q^T dM - dM^T Q); transposing that
    linear map gives dL/dM = 2 Q [A^-1 g]_x for g = vec(skew(Q^T dL_dQ)),
    the 2 coming from <[a]_x, [b]_x> = 2 a.b.
    """
    S = np.swapaxes(Q, 1, 2) @ M
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    tr = np.trace(S, axis1=1, axis2=2)
    A = tr[:, None, None] * np.eye(3)[None] - S
    QtG = np.swapaxes(Q, 1, 2) @ dL_dQ
    K = 0.5 * (QtG - np.swapaxes(QtG, 1, 2))
    g = np.stack([K[:, 2, 1], K[:, 0, 2], K[:, 1, 0]], axis=1)
    h = np.linalg.solve(A, g[:, :, None])[:, :, 0]
    zeros = np.zeros_like(h[:, 0])
    Hx = np.stack([
        np.stack([zeros, -h[:, 2], h[:, 1]], axis=1),
        np.stack([h[:, 2], zeros, -h[:, 0]], axis=1),
        np.stack([-h[:, 1], h[:, 0], zeros], axis=1),
    ], axis=1)
    return 2.0 * (Q @ Hx)


def floor_norm(v, floor=WEIGHT_FLOOR):
    """Clamp entries below the floor, then L1-normalize each row."""
    u = np.maximum(v, floor)
    return u / u.sum(axis=-1, keepdims=True)


class BlendWeightField:
    """Residual blend weights: w = floor_norm(f(x_c) + w^S(x_c)).

    w^S is the skin-weight row of the nearest template vertex, cached per
    splat. floor_norm clamps entries at WEIGHT_FLOOR and L1-normalizes;
    rows whose residual is exactly zero return the cached w^S verbatim, so
    a zero-initialized network reproduces the template weights bitwise.
    """

    def __init__(self, net, template_weights):
        self.net = net
        self.template_weights = np.asarray(template_weights, dtype=np.float64)
        if self.template_weights.shape[1] != net.out_dim:
            raise ValueError("template weight width must match net output")

    @classmethod
    def for_splats(cls, net, template, positions):
        idx, _ = spatial.nearest_vertex(template.vertices, positions)
        return cls(net, template.vertex_skin_weights[idx])

    def refresh(self, template, positions):
        """Recompute cached w^S (after density control moved/added splats)."""
        idx, _ = spatial.nearest_vertex(template.vertices, positions)
        self.template_weights = template.vertex_skin_weights[idx]

    def weights(self, positions):
        """Blend weights for (N, 3) canonical positions. Returns (w, cache)."""
        resid, fcache = mlpmod.mlp_forward(self.net, positions)
        v = resid + self.template_weights
        u = np.maximum(v, WEIGHT_FLOOR)
        total = u.sum(axis=1, keepdims=True)
        w = u / total
        zero_rows = ~np.any(resid != 0.0, axis=1)
        if np.any(zero_rows):
            w[zero_rows] = self.template_weights[zero_rows]
        cache = (fcache, v, u, total, w)
        return w, cache

    def weights_backward(self, cache, dL_dw):
        """Returns (grads_w, grads_b, dL_dpositions) for the network."""
        fcache, v, u, total, w = cache
        w_formula = u / total
        # normalization: dL/du_j = (dL/dw_j - <dL/dw, w>) / total
        inner = np.sum(dL_dw * w_formula, axis=1, keepdims=True)
        dL_du = (dL_dw - inner) / total
        dL_dv = np.where(v > WEIGHT_FLOOR, dL_du, 0.0)
        return mlpmod.mlp_backward(self.net, fcache, dL_dv)


def blend_weights(field, positions):
    w, _ = field.weights(positions)
    return w


def deform(positions, rotations, weights, bones):
    """LBS-deform splats into observation space.

    Args:
        positions: (N, 3) canonical positions x_c.
        rotations: (N, 3, 3) canonical rotation matrices R_c.
        weights: (N, B) blend weights.
        bones: BoneTransformSet.
    Returns:
        (x_o (N, 3), R_o (N, 3, 3), cache for deform_backward).
    """
    T = np.einsum("nb,bij->nij", weights, bones.relative)
    Trot = T[:, :3, :3]
    x_o = np.einsum("nij,nj->ni", Trot, positions) + T[:, :3, 3]
    M = Trot @ rotations
    R_o = polar_rotation(M)
    cache = (positions, rotations, weights, bones, Trot, M, R_o)
    return x_o, R_o, cache


def deform_backward(cache, dL_dxo, dL_dRo):
    """Reverse of deform. Returns (dL_dx direct term, dL_dRc, dL_dweights).

    The position gradient here covers only the rigid transform path;
    the caller adds the blend-field path from weights_backward, which owns
    the dependence of w on x_c.
    """
    positions, rotations, weights, bones, Trot, M, R_o = cache
    dL_dM = polar_backward(M, R_o, dL_dRo)
    # M = Trot R_c
    dL_dRc = np.einsum("nji,njk->nik", Trot, dL_dM)
    dL_dTrot = np.einsum("nik,njk->nij", dL_dM, rotations)
    # x_o = Trot x_c + t
    dL_dTrot += np.einsum("ni,nj->nij", dL_dxo, positions)
    dL_dt = dL_dxo
    dL_dx = np.einsum("nji,nj->ni", Trot, dL_dxo)
    # T = sum_b w_b B_b
    Brel = bones.relative
    dL_dweights = (
        np.einsum("nij,bij->nb", dL_dTrot, Brel[:, :3, :3])
        + np.einsum("ni,bi->nb", dL_dt, Brel[:, :3, 3])
    )
    return dL_dx, dL_dRc, dL_dweights
