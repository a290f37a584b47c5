"""Bundled 24-joint capsule humanoid template.

The skeleton follows the common full-body joint layout (pelvis root, 3-link
spine, neck/head, collar/shoulder/elbow/wrist/hand arms, hip/knee/ankle/foot
legs), left-right symmetric about x=0, facing +Z, roughly 1.75 m tall.
Surface geometry is one capsule mesh per bone; every vertex is skinned
one-hot to the bone's child joint. The canonical pose is the rest geometry
itself (all-zero rotations, an A-ish pose); a star pose with raised arms and
spread legs ships for use as the pose-sampling mean.
"""

from __future__ import annotations

import numpy as np

from .model import Pose, RiggedTemplate

JOINTS = [
    # name, parent, rest position
    ("pelvis", None, (0.0, 0.0, 0.0)),
    ("l_hip", "pelvis", (0.09, -0.06, 0.0)),
    ("r_hip", "pelvis", (-0.09, -0.06, 0.0)),
    ("spine1", "pelvis", (0.0, 0.12, 0.0)),
    ("l_knee", "l_hip", (0.10, -0.48, 0.0)),
    ("r_knee", "r_hip", (-0.10, -0.48, 0.0)),
    ("spine2", "spine1", (0.0, 0.26, 0.0)),
    ("l_ankle", "l_knee", (0.11, -0.88, 0.0)),
    ("r_ankle", "r_knee", (-0.11, -0.88, 0.0)),
    ("spine3", "spine2", (0.0, 0.38, 0.0)),
    ("l_foot", "l_ankle", (0.11, -0.93, 0.10)),
    ("r_foot", "r_ankle", (-0.11, -0.93, 0.10)),
    ("neck", "spine3", (0.0, 0.55, 0.0)),
    ("l_collar", "spine3", (0.06, 0.46, 0.0)),
    ("r_collar", "spine3", (-0.06, 0.46, 0.0)),
    ("head", "neck", (0.0, 0.68, 0.0)),
    ("l_shoulder", "l_collar", (0.18, 0.48, 0.0)),
    ("r_shoulder", "r_collar", (-0.18, 0.48, 0.0)),
    ("l_elbow", "l_shoulder", (0.40, 0.34, 0.0)),
    ("r_elbow", "r_shoulder", (-0.40, 0.34, 0.0)),
    ("l_wrist", "l_elbow", (0.60, 0.22, 0.0)),
    ("r_wrist", "r_elbow", (-0.60, 0.22, 0.0)),
    ("l_hand", "l_wrist", (0.67, 0.17, 0.0)),
    ("r_hand", "r_wrist", (-0.67, 0.17, 0.0)),
]

# capsule radius per bone, keyed by the bone's child joint
BONE_RADIUS = {
    "l_hip": 0.07, "r_hip": 0.07,
    "l_knee": 0.07, "r_knee": 0.07,
    "l_ankle": 0.055, "r_ankle": 0.055,
    "l_foot": 0.04, "r_foot": 0.04,
    "spine1": 0.11, "spine2": 0.12, "spine3": 0.12,
    "neck": 0.05,
    "l_collar": 0.08, "r_collar": 0.08,
    "head": 0.09,
    "l_shoulder": 0.06, "r_shoulder": 0.06,
    "l_elbow": 0.045, "r_elbow": 0.045,
    "l_wrist": 0.04, "r_wrist": 0.04,
    "l_hand": 0.035, "r_hand": 0.035,
}

KEYPOINT_MAP = {
    "nose": "head",
    "neck": "neck",
    "right_shoulder": "r_shoulder",
    "right_elbow": "r_elbow",
    "right_wrist": "r_wrist",
    "left_shoulder": "l_shoulder",
    "left_elbow": "l_elbow",
    "left_wrist": "l_wrist",
    "right_hip": "r_hip",
    "right_knee": "r_knee",
    "right_ankle": "r_ankle",
    "left_hip": "l_hip",
    "left_knee": "l_knee",
    "left_ankle": "l_ankle",
    "right_eye": "head",
    "left_eye": "head",
    "right_ear": "head",
    "left_ear": "head",
}

RING_POINTS = 10
RING_SEGMENTS = 4


def _bone_frame(axis):
    ref = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(axis, ref)) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    u1 = np.cross(axis, ref)
    u1 /= np.linalg.norm(u1)
    u2 = np.cross(axis, u1)
    return u1, u2


def _capsule_mesh(p0, p1, radius, offset):
    """Ring-mesh capsule from p0 to p1. Returns (vertices, faces)."""
    axis = p1 - p0
    length = np.linalg.norm(axis)
    axis = axis / length
    u1, u2 = _bone_frame(axis)
    verts = []
    theta = 2.0 * np.pi * np.arange(RING_POINTS) / RING_POINTS
    circle = np.outer(np.cos(theta), u1) + np.outer(np.sin(theta), u2)
    for s in range(RING_SEGMENTS + 1):
        t = s / RING_SEGMENTS
        center = p0 + t * (p1 - p0)
        verts.append(center + radius * circle)
    verts = np.concatenate(verts, axis=0)
    pole0 = p0 - radius * axis
    pole1 = p1 + radius * axis
    verts = np.concatenate([verts, pole0[None], pole1[None]], axis=0)

    faces = []
    m = RING_POINTS
    for s in range(RING_SEGMENTS):
        for i in range(m):
            a = s * m + i
            b = s * m + (i + 1) % m
            c = (s + 1) * m + i
            d = (s + 1) * m + (i + 1) % m
            faces.append((a, b, c))
            faces.append((b, d, c))
    i_pole0 = verts.shape[0] - 2
    i_pole1 = verts.shape[0] - 1
    for i in range(m):
        faces.append((i_pole0, (i + 1) % m, i))
        top = RING_SEGMENTS * m
        faces.append((i_pole1, top + i, top + (i + 1) % m))
    faces = np.asarray(faces, dtype=np.int64) + offset
    return verts, faces


def build_toy_humanoid():
    """Construct the bundled humanoid template from scratch."""
    names = [j[0] for j in JOINTS]
    rest = np.array([j[2] for j in JOINTS], dtype=np.float64)
    parent = np.array(
        [-1 if j[1] is None else names.index(j[1]) for j in JOINTS], dtype=np.int64
    )

    all_verts = []
    all_faces = []
    weight_joint = []
    offset = 0
    for child in range(1, len(names)):
        p0 = rest[parent[child]]
        p1 = rest[child]
        radius = BONE_RADIUS[names[child]]
        v, f = _capsule_mesh(p0, p1, radius, offset)
        all_verts.append(v)
        all_faces.append(f)
        weight_joint.extend([child] * v.shape[0])
        offset += v.shape[0]
    vertices = np.concatenate(all_verts, axis=0)
    faces = np.concatenate(all_faces, axis=0)
    weights = np.zeros((vertices.shape[0], len(names)))
    weights[np.arange(vertices.shape[0]), weight_joint] = 1.0

    canonical = Pose.zero(len(names))
    star_rot = np.zeros((len(names), 3))
    star_rot[names.index("l_shoulder")] = (0.0, 0.0, 0.6)
    star_rot[names.index("r_shoulder")] = (0.0, 0.0, -0.6)
    star_rot[names.index("l_hip")] = (0.0, 0.0, 0.2)
    star_rot[names.index("r_hip")] = (0.0, 0.0, -0.2)
    star = Pose(star_rot, np.zeros(3))

    return RiggedTemplate(
        joint_names=names,
        joint_rest_positions=rest,
        parent_index=parent,
        vertices=vertices,
        vertex_skin_weights=weights,
        canonical_pose=canonical,
        faces=faces,
        star_pose=star,
        keypoint_map=dict(KEYPOINT_MAP),
    ).validate()
