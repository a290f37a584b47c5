"""Skeleton conditioning images.

Poses the template skeleton, projects the 18 standard body keypoints through
the camera and rasterizes colored bone segments plus keypoint discs on a
black background. The layout, limb connectivity and palette follow the common
18-point body convention so downstream pose-conditioned guidance models see
familiar inputs. Rasterization is pure numpy and fully deterministic.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..io import SchemaError
from ..kinematics import posed_joint_positions
from .project import project_points

KEYPOINT_NAMES = [
    "nose", "neck",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "right_eye", "left_eye", "right_ear", "left_ear",
]

# limb k connects KEYPOINT_NAMES[i] -> [j] and is drawn in LIMB_PALETTE[k]
LIMBS = [
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
]

PALETTE = np.array([
    (255, 0, 0), (255, 85, 0), (255, 170, 0), (255, 255, 0),
    (170, 255, 0), (85, 255, 0), (0, 255, 0), (0, 255, 85),
    (0, 255, 170), (0, 255, 255), (0, 170, 255), (0, 85, 255),
    (0, 0, 255), (85, 0, 255), (170, 0, 255), (255, 0, 255),
    (255, 0, 170), (255, 0, 85),
], dtype=np.float64) / 255.0


def _draw_disc(canvas, center, radius, color):
    h, w = canvas.shape[:2]
    x0 = max(int(np.floor(center[0] - radius)), 0)
    x1 = min(int(np.ceil(center[0] + radius)), w - 1)
    y0 = max(int(np.floor(center[1] - radius)), 0)
    y1 = min(int(np.ceil(center[1] + radius)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
    ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
    mask = (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= radius ** 2
    canvas[y0:y1 + 1, x0:x1 + 1][mask] = color


def _draw_segment(canvas, p0, p1, thickness, color):
    h, w = canvas.shape[:2]
    lo = np.minimum(p0, p1) - thickness
    hi = np.maximum(p0, p1) + thickness
    x0 = max(int(np.floor(lo[0])), 0)
    x1 = min(int(np.ceil(hi[0])), w - 1)
    y0 = max(int(np.floor(lo[1])), 0)
    y1 = min(int(np.ceil(hi[1])), h - 1)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
    ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
    d = p1 - p0
    len2 = float(d @ d)
    if len2 < 1e-12:
        _draw_disc(canvas, p0, thickness, color)
        return
    t = ((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / len2
    t = np.clip(t, 0.0, 1.0)
    dist2 = (xs - (p0[0] + t * d[0])) ** 2 + (ys - (p0[1] + t * d[1])) ** 2
    mask = dist2 <= thickness ** 2
    canvas[y0:y1 + 1, x0:x1 + 1][mask] = color


def render_pose_image(template, pose, camera, height=None, width=None):
    """Rasterize the posed skeleton as an RGB conditioning image.

    Args:
        template: RiggedTemplate with a complete keypoint mapping.
        pose: Pose to draw.
        camera: viewing camera; height/width override its image size.
    Returns:
        (H, W, 3) float64 image in [0, 1], black background.
    Raises:
        SchemaError: keypoint mapping absent or missing entries.
    """
    if height is not None or width is not None:
        camera = replace(camera, height=height or camera.height,
                         width=width or camera.width)
    if template.keypoint_map is None:
        raise SchemaError("template declares no keypoint mapping")
    missing = [k for k in KEYPOINT_NAMES if k not in template.keypoint_map]
    if missing:
        raise SchemaError(f"keypoint mapping missing entries: {missing}")
    name_to_joint = {n: i for i, n in enumerate(template.joint_names)}
    joints = []
    for kp in KEYPOINT_NAMES:
        jname = template.keypoint_map[kp]
        if jname not in name_to_joint:
            raise SchemaError(f"keypoint {kp!r} maps to unknown joint {jname!r}")
        joints.append(name_to_joint[jname])

    posed = posed_joint_positions(template, pose)[joints]
    uv, depth = project_points(camera, posed)
    visible = depth > camera.near

    canvas = np.zeros((camera.height, camera.width, 3))
    size = min(camera.height, camera.width)
    radius = max(2.0, size / 64.0)
    for k, (i, j) in enumerate(LIMBS):
        if visible[i] and visible[j]:
            _draw_segment(canvas, uv[i], uv[j], 0.8 * radius, PALETTE[k])
    for i in range(len(KEYPOINT_NAMES)):
        if visible[i]:
            _draw_disc(canvas, uv[i], radius, PALETTE[i])
    return canvas
