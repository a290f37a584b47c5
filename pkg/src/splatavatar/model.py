"""Core data types: splat clouds, rigged templates, poses, cameras."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


def sigmoid(x):
    # numerically stable on both tails
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


def normalize_quaternions(q):
    """Return q / |q| for an (N, 4) array of (w, x, y, z) quaternions."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norm


def quat_to_rotmat(q):
    """Convert (N, 4) quaternions (w, x, y, z) to (N, 3, 3) rotation matrices.

    Input is normalized first, so gradients must go through
    quat_to_rotmat_backward which accounts for the projection.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    if single:
        q = q[None]
    qn = normalize_quaternions(q)
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_to_rotmat_backward(q, dL_dR):
    """Gradient of quat_to_rotmat wrt the raw (unnormalized) quaternions.

    Args:
        q: (N, 4) raw quaternions as passed to the forward.
        dL_dR: (N, 3, 3) upstream gradient.
    Returns:
        (N, 4) gradient wrt q, including the normalization projection.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    G = dL_dR

    # dR/d(qn) assembled entry by entry
    dw = (-2 * z * G[:, 0, 1] + 2 * y * G[:, 0, 2]
          + 2 * z * G[:, 1, 0] - 2 * x * G[:, 1, 2]
          - 2 * y * G[:, 2, 0] + 2 * x * G[:, 2, 1])
    dx = (2 * y * G[:, 0, 1] + 2 * z * G[:, 0, 2]
          + 2 * y * G[:, 1, 0] - 4 * x * G[:, 1, 1] - 2 * w * G[:, 1, 2]
          + 2 * z * G[:, 2, 0] + 2 * w * G[:, 2, 1] - 4 * x * G[:, 2, 2])
    dy = (-4 * y * G[:, 0, 0] + 2 * x * G[:, 0, 1] + 2 * w * G[:, 0, 2]
          + 2 * x * G[:, 1, 0] + 2 * z * G[:, 1, 2]
          - 2 * w * G[:, 2, 0] + 2 * z * G[:, 2, 1] - 4 * y * G[:, 2, 2])
    dz = (-4 * z * G[:, 0, 0] - 2 * w * G[:, 0, 1] + 2 * x * G[:, 0, 2]
          + 2 * w * G[:, 1, 0] - 4 * z * G[:, 1, 1] + 2 * y * G[:, 1, 2]
          + 2 * x * G[:, 2, 0] + 2 * y * G[:, 2, 1])
    g_qn = np.stack([dw, dx, dy, dz], axis=1)

    # project through qn = q / |q|: dL/dq = (I - qn qn^T) / |q| . g_qn
    g_q = (g_qn - qn * np.sum(g_qn * qn, axis=1, keepdims=True)) / norm
    return g_q


def covariance_from(rotations, log_scales):
    """Sigma = R S S^T R^T for quaternion rotations and log scales."""
    R = quat_to_rotmat(rotations)
    S = np.exp(np.asarray(log_scales, dtype=np.float64))
    RS = R * S[:, None, :]
    return RS @ np.swapaxes(RS, 1, 2)


@dataclass
class Pose:
    """Per-joint axis-angle rotations plus a root translation."""

    joint_rotations: np.ndarray  # (B, 3) radians
    root_translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)

    @property
    def n_joints(self):
        return self.joint_rotations.shape[0]

    @classmethod
    def zero(cls, n_joints):
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    def copy(self):
        return Pose(self.joint_rotations.copy(), self.root_translation.copy())

    def same_as(self, other):
        """Bitwise equality; used for the exact canonical-pose fast path."""
        return (np.array_equal(self.joint_rotations, other.joint_rotations)
                and np.array_equal(self.root_translation, other.root_translation))


@dataclass
class RiggedTemplate:
    """Skeleton, surface vertices and per-vertex skinning weights.

    Joints must be listed parent-before-child with the root at index 0.
    """

    joint_names: list
    joint_rest_positions: np.ndarray  # (B, 3)
    parent_index: np.ndarray  # (B,), -1 for the root
    vertices: np.ndarray  # (V, 3)
    vertex_skin_weights: np.ndarray  # (V, B), rows sum to 1
    canonical_pose: Pose
    faces: Optional[np.ndarray] = None  # (F, 3) int, optional
    star_pose: Optional[Pose] = None
    keypoint_map: Optional[dict] = None  # keypoint name -> joint name

    def __post_init__(self):
        self.joint_rest_positions = np.asarray(self.joint_rest_positions, dtype=np.float64)
        self.parent_index = np.asarray(self.parent_index, dtype=np.int64)
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.vertex_skin_weights = np.asarray(self.vertex_skin_weights, dtype=np.float64)
        if self.faces is not None:
            self.faces = np.asarray(self.faces, dtype=np.int64)

    @property
    def n_joints(self):
        return self.joint_rest_positions.shape[0]

    def joint_index(self, name):
        return self.joint_names.index(name)

    def validate(self):
        B = self.n_joints
        if B < 1:
            raise ValueError("template has no joints")
        if len(self.joint_names) != B or self.parent_index.shape != (B,):
            raise ValueError("joint arrays disagree on joint count")
        if self.parent_index[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for i in range(1, B):
            p = self.parent_index[i]
            if not (0 <= p < i):
                raise ValueError(
                    f"joint {i} ({self.joint_names[i]}): parent {p} must precede it"
                )
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        V = self.vertices.shape[0]
        if self.vertex_skin_weights.shape != (V, B):
            raise ValueError("skin_weights must be (V, B)")
        if np.any(self.vertex_skin_weights < 0):
            raise ValueError("skin weights must be non-negative")
        sums = self.vertex_skin_weights.sum(axis=1)
        bad = np.abs(sums - 1.0) > 1e-6
        if np.any(bad):
            raise ValueError(
                f"skin-weight rows must sum to 1, first offender: vertex {int(np.argmax(bad))}"
            )
        if self.canonical_pose.n_joints != B:
            raise ValueError("canonical_pose joint count mismatch")
        if self.star_pose is not None and self.star_pose.n_joints != B:
            raise ValueError("star_pose joint count mismatch")
        if self.faces is not None:
            if self.faces.ndim != 2 or self.faces.shape[1] != 3:
                raise ValueError("faces must be (F, 3)")
            if np.any(self.faces < 0) or np.any(self.faces >= V):
                raise ValueError("face index out of range")
        return self


@dataclass
class Camera:
    """Orbit camera: azimuth/elevation in degrees around a target point.

    Azimuth 0 looks at the +Z face of the subject (front), +90 orbits to the
    subject's right side (-X), 180 is the back. Elevation > 0 is above.
    """

    azimuth: float = 0.0
    elevation: float = 0.0
    distance: float = 2.5
    fov_y: float = 45.0
    width: int = 512
    height: int = 512
    near: float = 0.1
    far: float = 100.0
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if not (0.0 < self.fov_y < 180.0):
            raise ValueError("fov_y must be in (0, 180)")
        if not (self.near < self.far):
            raise ValueError("near must be < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be >= 1")

    @property
    def position(self):
        a = np.deg2rad(self.azimuth)
        e = np.deg2rad(self.elevation)
        offset = np.array([
            -np.sin(a) * np.cos(e),
            np.sin(e),
            np.cos(a) * np.cos(e),
        ])
        return self.target + self.distance * offset

    def world_to_camera(self):
        """Rows (x_cam, y_cam, z_cam) of the world-to-camera rotation, plus origin.

        Returns (R, pos): camera coords of world point p are R @ (p - pos),
        with z the viewing depth and y pointing down the image.
        """
        pos = self.position
        fwd = self.target - pos
        fwd = fwd / np.linalg.norm(fwd)
        up = np.array([0.0, 1.0, 0.0])
        x_cam = np.cross(fwd, up)
        n = np.linalg.norm(x_cam)
        if n < 1e-8:  # looking straight up/down; pick a stable right vector
            x_cam = np.array([1.0, 0.0, 0.0])
        else:
            x_cam = x_cam / n
        y_cam = np.cross(fwd, x_cam)
        y_cam = y_cam / np.linalg.norm(y_cam)
        R = np.stack([x_cam, y_cam, fwd], axis=0)
        return R, pos

    @property
    def focal(self):
        f = (self.height / 2.0) / np.tan(np.deg2rad(self.fov_y) / 2.0)
        return f, f  # fx, fy

    @property
    def principal_point(self):
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0


@dataclass
class SplatCloud:
    """Canonical-space Gaussian set with raw (unconstrained) parameters.

    Opacity is stored as a logit and scale as a log so that any parameter
    value maps to a valid splat. grad_accum/grad_count hold the view-space
    gradient statistics consumed by density control.
    """

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) quaternions (w, x, y, z)
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) in [0, 1]
    grad_accum: np.ndarray = None  # (N,)
    grad_count: np.ndarray = None  # (N,)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        n = self.positions.shape[0]
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n, dtype=np.int64)

    @property
    def n_splats(self):
        return self.positions.shape[0]

    def __len__(self):
        return self.positions.shape[0]

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def rotation_matrices(self):
        return quat_to_rotmat(self.rotations)

    def covariances(self):
        return covariance_from(self.rotations, self.log_scales)

    def validate(self):
        n = self.n_splats
        for name in ("rotations", "log_scales", "opacity_logits", "colors",
                     "grad_accum", "grad_count"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValueError(f"{name} length {arr.shape[0]} != {n} splats")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("rotations must be unit quaternions (1e-6)")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite positions")
        return self

    def copy(self):
        return SplatCloud(
            self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.colors.copy(),
            self.grad_accum.copy(), self.grad_count.copy(),
        )

    def reset_grad_stats(self):
        self.grad_accum[:] = 0.0
        self.grad_count[:] = 0


def _sample_on_triangles(vertices, faces, n, rng):
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        # degenerate surface; fall back to vertex sampling
        idx = rng.integers(0, vertices.shape[0], size=n)
        return vertices[idx].copy()
    which = rng.choice(faces.shape[0], size=n, p=areas / total)
    u1 = rng.random(n)
    u2 = rng.random(n)
    s = np.sqrt(u1)
    w0 = 1.0 - s
    w1 = s * (1.0 - u2)
    w2 = s * u2
    return (w0[:, None] * a[which] + w1[:, None] * b[which] + w2[:, None] * c[which])


def init_cloud_from_template(template, n, seed):
    """Initialize n splats on the template surface.

    Area-weighted uniform sampling over triangles when faces exist, vertex
    sampling otherwise. Rotations start at identity, scales isotropic at the
    mean nearest-neighbor distance, opacity at 0.5, color mid-gray.
    """
    from . import spatial

    template.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    if template.vertices.shape[0] == 0:
        raise ValueError("template has no surface to sample")
    rng = np.random.default_rng(seed)
    if template.faces is not None and template.faces.shape[0] > 0:
        positions = _sample_on_triangles(template.vertices, template.faces, n, rng)
    else:
        idx = rng.integers(0, template.vertices.shape[0], size=n)
        positions = template.vertices[idx].copy()

    if n > 1:
        _, nn_dist = spatial.nearest_neighbors(positions, k=1, exclude_self=True)
        mean_nn = float(np.mean(nn_dist))
    else:
        mean_nn = 0.1
    mean_nn = max(mean_nn, 1e-6)

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    log_scales = np.full((n, 3), np.log(mean_nn))
    opacity_logits = np.zeros(n)
    colors = np.full((n, 3), 0.5)
    return SplatCloud(positions, rotations, log_scales, opacity_logits, colors)
