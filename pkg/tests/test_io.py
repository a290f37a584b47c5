import numpy as np
import pytest

from splatavatar import io
from splatavatar.humanoid import build_toy_humanoid
from splatavatar.model import Pose, init_cloud_from_template


def test_ply_roundtrip(tmp_path, humanoid):
    cloud = init_cloud_from_template(humanoid, 200, seed=3)
    rng = np.random.default_rng(0)
    cloud.colors[:] = rng.random((200, 3))
    cloud.opacity_logits[:] = rng.standard_normal(200)
    path = tmp_path / "cloud.ply"
    io.save_cloud_ply(cloud, path)
    back = io.load_cloud_ply(path)
    assert back.n_splats == 200
    assert np.abs(back.positions - cloud.positions).max() < 1e-6
    assert np.abs(back.colors - cloud.colors).max() < 1e-6
    assert np.abs(back.opacity_logits - cloud.opacity_logits).max() < 1e-5
    back.validate()


def test_ply_missing_field(tmp_path):
    path = tmp_path / "bad.ply"
    fields = [f for f in io.PLY_FIELDS if f != "rot_3"]
    header = ["ply", "format binary_little_endian 1.0", "element vertex 1"]
    header += [f"property float {f}" for f in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        fh.write(np.zeros(len(fields), dtype="<f4").tobytes())
    with pytest.raises(io.SchemaError, match="rot_3"):
        io.load_cloud_ply(path)


def test_ply_truncated(tmp_path, humanoid):
    cloud = init_cloud_from_template(humanoid, 10, seed=0)
    path = tmp_path / "cloud.ply"
    io.save_cloud_ply(cloud, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(io.SchemaError, match="truncated"):
        io.load_cloud_ply(path)


def test_template_roundtrip(tmp_path, humanoid):
    path = tmp_path / "t.json"
    io.save_template(humanoid, path)
    back = io.load_template(path)
    assert back.joint_names == humanoid.joint_names
    assert np.array_equal(back.joint_rest_positions, humanoid.joint_rest_positions)
    assert np.array_equal(back.vertex_skin_weights, humanoid.vertex_skin_weights)
    assert np.array_equal(back.faces, humanoid.faces)
    assert back.keypoint_map == humanoid.keypoint_map
    assert back.star_pose.joint_rotations.shape == (24, 3)


def test_bundled_asset_matches_builder():
    built = build_toy_humanoid()
    shipped = io.load_template(io.toy_humanoid_path())
    assert shipped.joint_names == built.joint_names
    assert np.array_equal(shipped.vertices, built.vertices)
    assert np.array_equal(shipped.vertex_skin_weights, built.vertex_skin_weights)
    assert np.array_equal(shipped.faces, built.faces)


def test_template_bad_weight_sum(tmp_path, humanoid):
    path = tmp_path / "t.json"
    io.save_template(humanoid, path)
    import json

    doc = json.loads(path.read_text())
    doc["skin_weights"][0] = [["pelvis", 0.9]]
    path.write_text(json.dumps(doc))
    with pytest.raises(io.SchemaError, match="sum to 1"):
        io.load_template(path)


def test_template_unknown_joint_in_weights(tmp_path, humanoid):
    path = tmp_path / "t.json"
    io.save_template(humanoid, path)
    import json

    doc = json.loads(path.read_text())
    doc["skin_weights"][5] = [["no_such_joint", 1.0]]
    path.write_text(json.dumps(doc))
    with pytest.raises(io.SchemaError, match="no_such_joint"):
        io.load_template(path)


def test_template_missing_key(tmp_path):
    path = tmp_path / "t.json"
    path.write_text("{}")
    with pytest.raises(io.SchemaError, match="joints"):
        io.load_template(path)


def test_pose_sequence_roundtrip(tmp_path):
    poses = [Pose(np.full((24, 3), 0.1 * i), np.array([0.0, 0, i])) for i in range(3)]
    path = tmp_path / "seq.json"
    io.save_pose_sequence(poses, path)
    back = io.load_pose_sequence(path, 24)
    assert len(back) == 3
    assert np.array_equal(back[2].joint_rotations, poses[2].joint_rotations)
    with pytest.raises(io.SchemaError, match="joints"):
        io.load_pose_sequence(path, 23)


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((16, 8, 3))
    path = tmp_path / "img.png"
    io.save_png(img, path)
    back = io.load_png(path)
    assert back.shape == (16, 8, 3)
    assert np.abs(back - img).max() < 1.0 / 255
