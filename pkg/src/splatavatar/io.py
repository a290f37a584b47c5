"""File formats: splat PLY, rigged-template JSON, pose sequences, PNG."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import Pose, RiggedTemplate, SplatCloud


class SchemaError(ValueError):
    """Malformed input file; the message names the offending field."""


PLY_FIELDS = [
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
]


def save_cloud_ply(cloud, path):
    """Write a splat cloud in the common 14-float binary PLY layout.

    f_dc_* carries plain RGB in [0,1], opacity the raw logit, scale_* the
    log scales and rot_* the (w,x,y,z) quaternion.
    """
    n = cloud.n_splats
    data = np.empty((n, len(PLY_FIELDS)), dtype="<f4")
    data[:, 0:3] = cloud.positions
    data[:, 3:6] = cloud.colors
    data[:, 6] = cloud.opacity_logits
    data[:, 7:10] = cloud.log_scales
    data[:, 10:14] = cloud.rotations
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {f}" for f in PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def load_cloud_ply(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise SchemaError("ply: missing end_header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]
    if not header or header[0].strip() != "ply":
        raise SchemaError("ply: missing magic")
    n = None
    props = []
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "binary_little_endian":
                raise SchemaError(f"ply: unsupported format {parts[1]}")
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise SchemaError(f"ply: unsupported element {parts[1]}")
            n = int(parts[2])
        elif parts[0] == "property":
            if parts[1] != "float":
                raise SchemaError(f"ply: property {parts[2]}: only float supported")
            props.append(parts[2])
    if n is None:
        raise SchemaError("ply: missing element vertex")
    for f in PLY_FIELDS:
        if f not in props:
            raise SchemaError(f"ply: missing property {f}")
    extra = [p for p in props if p not in PLY_FIELDS]
    if extra:
        raise SchemaError(f"ply: unexpected property {extra[0]}")
    expected = n * len(props) * 4
    if len(body) < expected:
        raise SchemaError("ply: truncated vertex data")
    data = np.frombuffer(body[:expected], dtype="<f4").reshape(n, len(props))
    col = {p: data[:, i].astype(np.float64) for i, p in enumerate(props)}
    positions = np.stack([col["x"], col["y"], col["z"]], axis=1)
    colors = np.stack([col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]], axis=1)
    log_scales = np.stack([col["scale_0"], col["scale_1"], col["scale_2"]], axis=1)
    rotations = np.stack([col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]], axis=1)
    # float32 storage denormalizes quaternions slightly
    norms = np.linalg.norm(rotations, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise SchemaError("ply: zero-norm rotation")
    rotations = rotations / norms
    return SplatCloud(positions, rotations, log_scales, col["opacity"], colors)


def _require(d, key, where):
    if key not in d:
        raise SchemaError(f"{where}: missing key '{key}'")
    return d[key]


def _vec3(v, where):
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,):
        raise SchemaError(f"{where}: expected 3 numbers")
    return arr


def _parse_pose(d, n_joints, where):
    rot = np.asarray(_require(d, "joint_rotations", where), dtype=np.float64)
    if rot.ndim != 2 or rot.shape[1] != 3:
        raise SchemaError(f"{where}.joint_rotations: expected Bx3 triples")
    if rot.shape[0] != n_joints:
        raise SchemaError(
            f"{where}.joint_rotations: {rot.shape[0]} joints, template has {n_joints}"
        )
    trans = _vec3(_require(d, "root_translation", where), f"{where}.root_translation")
    return Pose(rot, trans)


def load_template(path):
    """Load a rigged template from its JSON document."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"template: invalid JSON ({e})") from e
    joints = _require(doc, "joints", "template")
    if not isinstance(joints, list) or not joints:
        raise SchemaError("template.joints: expected a non-empty list")
    names = []
    rest = []
    parent = []
    for i, j in enumerate(joints):
        where = f"template.joints[{i}]"
        name = _require(j, "name", where)
        names.append(name)
        rest.append(_vec3(_require(j, "rest_position", where), f"{where}.rest_position"))
        parent.append(_require(j, "parent", where))
    parent_idx = []
    for i, p in enumerate(parent):
        if p is None or p == -1:
            parent_idx.append(-1)
        elif isinstance(p, int):
            parent_idx.append(p)
        elif isinstance(p, str):
            if p not in names:
                raise SchemaError(f"template.joints[{i}].parent: unknown joint '{p}'")
            parent_idx.append(names.index(p))
        else:
            raise SchemaError(f"template.joints[{i}].parent: expected name or index")

    vertices = np.asarray(_require(doc, "vertices", "template"), dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise SchemaError("template.vertices: expected a list of 3-vectors")
    faces = None
    if doc.get("faces") is not None:
        faces = np.asarray(doc["faces"], dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise SchemaError("template.faces: expected a list of index triples")

    sw = _require(doc, "skin_weights", "template")
    if not isinstance(sw, list) or len(sw) != vertices.shape[0]:
        raise SchemaError(
            f"template.skin_weights: expected one entry per vertex ({vertices.shape[0]})"
        )
    weights = np.zeros((vertices.shape[0], len(names)))
    for vi, entries in enumerate(sw):
        for pair in entries:
            if len(pair) != 2:
                raise SchemaError(f"template.skin_weights[{vi}]: expected (joint, weight) pairs")
            joint, w = pair
            if isinstance(joint, str):
                if joint not in names:
                    raise SchemaError(f"template.skin_weights[{vi}]: unknown joint '{joint}'")
                joint = names.index(joint)
            weights[vi, joint] += float(w)

    canonical = _parse_pose(_require(doc, "canonical_pose", "template"),
                            len(names), "template.canonical_pose")
    star = None
    if doc.get("star_pose") is not None:
        star = _parse_pose(doc["star_pose"], len(names), "template.star_pose")
    keypoints = doc.get("keypoints")

    template = RiggedTemplate(
        joint_names=names,
        joint_rest_positions=np.asarray(rest),
        parent_index=np.asarray(parent_idx, dtype=np.int64),
        vertices=vertices,
        vertex_skin_weights=weights,
        canonical_pose=canonical,
        faces=faces,
        star_pose=star,
        keypoint_map=keypoints,
    )
    try:
        template.validate()
    except ValueError as e:
        raise SchemaError(f"template: {e}") from e
    return template


def _pose_to_dict(pose):
    return {
        "joint_rotations": pose.joint_rotations.tolist(),
        "root_translation": pose.root_translation.tolist(),
    }


def save_template(template, path):
    names = template.joint_names
    doc = {
        "joints": [
            {
                "name": names[i],
                "rest_position": template.joint_rest_positions[i].tolist(),
                "parent": None if template.parent_index[i] < 0 else names[template.parent_index[i]],
            }
            for i in range(template.n_joints)
        ],
        "vertices": template.vertices.tolist(),
        "faces": None if template.faces is None else template.faces.tolist(),
        "skin_weights": [
            [[names[j], float(w)] for j, w in zip(row.nonzero()[0], row[row.nonzero()[0]])]
            for row in template.vertex_skin_weights
        ],
        "canonical_pose": _pose_to_dict(template.canonical_pose),
        "star_pose": None if template.star_pose is None else _pose_to_dict(template.star_pose),
        "keypoints": template.keypoint_map,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_pose_sequence(path, n_joints):
    """Load a JSON list of pose frames, validated against the joint count."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"pose sequence: invalid JSON ({e})") from e
    if not isinstance(doc, list):
        raise SchemaError("pose sequence: expected a list of frames")
    frames = []
    for i, frame in enumerate(doc):
        frames.append(_parse_pose(frame, n_joints, f"frame[{i}]"))
    return frames


def save_pose_sequence(poses, path):
    with open(path, "w") as fh:
        json.dump([_pose_to_dict(p) for p in poses], fh)


def toy_humanoid_path():
    return Path(__file__).parent / "assets" / "toy_humanoid.json"


def save_png(image, path):
    """Save a float image in [0,1] (HxW or HxWx3) as 8-bit PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path):
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def png_bytes(image):
    """Encode a float image in [0,1] as in-memory PNG bytes."""
    import io as _io

    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    buf = _io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()
