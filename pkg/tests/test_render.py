import numpy as np
import pytest

from splatavatar.io import SchemaError
from splatavatar.kinematics import posed_joint_positions
from splatavatar.model import (Camera, Pose, SplatCloud,
                               normalize_quaternions, quat_to_rotmat)
from splatavatar.render import (project_gaussians, project_points,
                                reference_composite, render_gaussians,
                                render_pose_image)
from splatavatar.render.pipeline import chain_cloud_grads, cloud_render_inputs
from splatavatar.render.project import COV_DILATION


def random_cloud(rng, n, scale_range=(-4.5, -2.0)):
    return SplatCloud(
        positions=rng.normal(size=(n, 3)) * 0.4,
        rotations=normalize_quaternions(rng.normal(size=(n, 4))),
        log_scales=rng.uniform(*scale_range, size=(n, 3)),
        opacity_logits=rng.uniform(-2.0, 2.0, size=n),
        colors=rng.uniform(size=(n, 3)),
    )


def render_cloud(cloud, camera, background=(0.0, 0.0, 0.0), method="tile"):
    pos, rot, sc, op, col = cloud_render_inputs(cloud)
    return render_gaussians(pos, rot, sc, op, col, camera,
                            background=background, method=method)


# ---------------------------------------------------------------- projection

def test_optical_axis_splat_projects_to_image_center():
    cam = Camera(azimuth=37, elevation=12, distance=3.0, fov_y=50,
                 width=96, height=64)
    # the camera orbits the origin, so the origin sits on the optical axis
    proj = project_gaussians(np.zeros((1, 3)), np.eye(3)[None],
                             np.full((1, 3), 0.01), cam)
    cx, cy = cam.principal_point
    assert np.allclose(proj.means2d[0], [cx, cy], atol=1e-9)


def test_projected_std_matches_pinhole_ratio():
    s, d = 0.03, 2.4
    cam = Camera(azimuth=0, elevation=0, distance=d, fov_y=60,
                 width=128, height=128)
    proj = project_gaussians(np.zeros((1, 3)), np.eye(3)[None],
                             np.full((1, 3), s), cam)
    fx, _ = cam.focal
    std = np.sqrt(proj.cov2d[0, 0] - COV_DILATION)
    assert abs(std - fx * s / d) / (fx * s / d) < 0.02


def test_splat_behind_camera_is_culled():
    cam = Camera(azimuth=0, elevation=0, distance=2.0, fov_y=60,
                 width=32, height=32)
    # camera sits at z=+2 looking toward -z; z=+5 is behind it
    pos = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 0.0]])
    proj = project_gaussians(pos, np.stack([np.eye(3)] * 2),
                             np.full((2, 3), 0.01), cam)
    assert list(proj.ids) == [1]


def test_depth_increases_away_from_camera():
    cam = Camera(azimuth=0, elevation=0, distance=2.0, fov_y=60,
                 width=32, height=32)
    pos = np.array([[0.0, 0.0, 0.5], [0.0, 0.0, -0.5]])
    proj = project_gaussians(pos, np.stack([np.eye(3)] * 2),
                             np.full((2, 3), 0.01), cam)
    assert proj.depths[0] < proj.depths[1]


# --------------------------------------------------------------- compositing

def test_opaque_singleton_paints_its_color():
    cam = Camera(azimuth=0, elevation=0, distance=2.0, fov_y=60,
                 width=33, height=33)  # odd size: integer center pixel
    res = render_gaussians(np.zeros((1, 3)), np.eye(3)[None],
                           np.full((1, 3), 1.0), np.array([0.999999]),
                           np.array([[0.8, 0.3, 0.1]]), cam)
    # footprint is huge, so exp term is ~1 at the center; alpha clamps at 0.999
    assert np.allclose(res.image[16, 16], [0.8, 0.3, 0.1], atol=2e-3)
    assert res.alpha[16, 16] > 0.998


def test_two_splat_hand_composite():
    cam = Camera(azimuth=0, elevation=0, distance=2.0, fov_y=60,
                 width=33, height=33)
    pos = np.array([[0.0, 0.0, 0.5], [0.0, 0.0, -0.5]])
    rot = np.stack([np.eye(3)] * 2)
    scale = np.full((2, 3), 5.0)  # flat exponent across the image
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    res = render_gaussians(pos, rot, scale, np.array([0.5, 0.99999]), colors,
                           cam)
    assert np.allclose(res.image[16, 16], [0.5, 0.0, 0.5], atol=1e-3)


def test_tile_path_matches_reference():
    for seed in range(6):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 201))
        cloud = random_cloud(rng, n)
        cam = Camera(azimuth=float(rng.uniform(0, 360)),
                     elevation=float(rng.uniform(-30, 30)),
                     distance=2.0, fov_y=50, width=64, height=64)
        bg = tuple(rng.uniform(size=3))
        fast = render_cloud(cloud, cam, background=bg)
        ref = render_cloud(cloud, cam, background=bg, method="reference")
        assert np.abs(fast.image - ref.image).max() < 1e-5
        assert np.abs(fast.alpha - ref.alpha).max() < 1e-5


def test_energy_bound():
    rng = np.random.default_rng(42)
    cloud = random_cloud(rng, 120, scale_range=(-4.0, -1.0))
    cloud.opacity_logits[:] = rng.uniform(1.0, 8.0, size=120)  # near-opaque
    cam = Camera(azimuth=10, elevation=5, distance=1.5, fov_y=60,
                 width=48, height=48)
    res = render_cloud(cloud, cam, background=(1.0, 1.0, 1.0))
    assert np.isfinite(res.image).all()
    assert res.image.min() >= -1e-12 and res.image.max() <= 1.0 + 1e-12
    assert res.alpha.min() >= -1e-12 and res.alpha.max() <= 1.0 + 1e-12


def test_transmittance_never_increases_with_more_splats():
    rng = np.random.default_rng(7)
    cloud = random_cloud(rng, 60)
    cam = Camera(azimuth=0, elevation=0, distance=2.0, fov_y=60,
                 width=32, height=32)
    pos, rot, sc, op, col = cloud_render_inputs(cloud)
    proj = project_gaussians(pos, rot, sc, cam)
    order = proj.ids[proj.order]  # original indices, front to back
    prev_alpha = None
    for k in (10, 25, 40, 60):
        keep = order[:k]
        res = render_gaussians(pos[keep], rot[keep], sc[keep], op[keep],
                               col[keep], cam)
        if prev_alpha is not None:
            assert (res.alpha >= prev_alpha - 1e-12).all()
        prev_alpha = res.alpha


def test_translation_equivariance_in_orthographic_limit():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 80, scale_range=(-2.5, -1.5))
    d = 200.0
    cam = Camera(azimuth=0, elevation=0, distance=d, fov_y=0.5,
                 width=64, height=64)
    fx, _ = cam.focal
    shift = d / fx  # one pixel of lateral world offset
    base = render_cloud(cloud, cam).image
    moved = cloud.copy()
    moved.positions[:, 0] += shift  # screen x aligns with world +x here
    shifted = render_cloud(moved, cam).image
    assert np.abs(shifted[:, 1:] - base[:, :-1]).max() < 1e-3


# ------------------------------------------------------------------ backward

def _fd_check(cloud, cam, gimg, names, h=1e-3, rel_tol=1e-2):
    res = render_cloud(cloud, cam, background=(0.1, 0.2, 0.3))
    grads = chain_cloud_grads(cloud, res.backward(gimg))

    def loss():
        r = render_cloud(cloud, cam, background=(0.1, 0.2, 0.3))
        return float(np.sum(r.image * gimg))

    for name in names:
        arr = getattr(cloud, name)
        flat = arr.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            numeric[i] = (lp - lm) / (2 * h)
        analytic = grads[name].reshape(-1)
        mask = np.abs(numeric) > 1e-6
        assert mask.any(), f"no informative entries for {name}"
        rel = np.abs(analytic[mask] - numeric[mask]) / np.maximum(
            np.abs(analytic[mask]), np.abs(numeric[mask]))
        assert rel.max() < rel_tol, f"{name}: rel err {rel.max():.3e}"


def test_backward_matches_finite_differences():
    # seed picked away from 3-sigma footprint boundaries: the cutoff makes
    # the loss locally non-smooth, which pollutes FD at h=1e-3 (the analytic
    # gradient still matches FD as h -> 0 there)
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 12, scale_range=(-3.2, -1.8))
    cloud.opacity_logits[:] = rng.uniform(-1.0, 1.5, size=12)
    cloud.colors[:] = rng.uniform(0.1, 0.9, size=(12, 3))
    cam = Camera(azimuth=25, elevation=-5, distance=2.0, fov_y=55,
                 width=16, height=16)
    gimg = rng.normal(size=(16, 16, 3))
    _fd_check(cloud, cam, gimg,
              ["positions", "rotations", "log_scales", "opacity_logits",
               "colors"])


def test_zero_image_gradient_gives_zero_parameter_gradients():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, 20)
    cam = Camera(azimuth=0, elevation=0, distance=2.0, fov_y=60,
                 width=32, height=32)
    res = render_cloud(cloud, cam)
    grads = res.backward(np.zeros((32, 32, 3)))
    for field in (grads.positions, grads.rotations, grads.scales,
                  grads.opacities, grads.colors, grads.view_grad_norm):
        assert not field.any()
    assert not grads.touched.any()


def test_fully_occluded_splat_gets_no_color_gradient():
    cam = Camera(azimuth=0, elevation=0, distance=2.0, fov_y=60,
                 width=33, height=33)
    # two near-opaque front layers drive transmittance below the cutoff
    pos = np.array([[0.0, 0.0, 0.8], [0.0, 0.0, 0.6], [0.0, 0.0, -0.5]])
    rot = np.stack([np.eye(3)] * 3)
    scale = np.full((3, 3), 5.0)
    alphas = np.array([0.9999, 0.9999, 0.9])
    colors = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    res = render_gaussians(pos, rot, scale, alphas, colors, cam)
    # probe only the center pixel, where both front layers clamp at 0.999
    # and transmittance drops below the termination threshold
    gimg = np.zeros((33, 33, 3))
    gimg[16, 16] = 1.0
    grads = res.backward(gimg)
    assert not grads.colors[2].any()
    assert not grads.touched[2]
    assert grads.touched[0] and grads.touched[1]


def test_view_grad_norm_uses_ndc_units():
    rng = np.random.default_rng(9)
    cloud = random_cloud(rng, 5, scale_range=(-2.5, -2.0))
    cam = Camera(azimuth=0, elevation=0, distance=2.0, fov_y=60,
                 width=40, height=20)
    res = render_cloud(cloud, cam)
    gimg = rng.normal(size=(20, 40, 3))
    grads = res.backward(gimg)
    assert (grads.view_grad_norm[grads.touched] >= 0).all()
    assert grads.view_grad_norm[~grads.touched].sum() == 0.0


def test_reference_path_has_no_backward():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 5)
    cam = Camera(azimuth=0, elevation=0, distance=2.0, fov_y=60,
                 width=16, height=16)
    res = render_cloud(cloud, cam, method="reference")
    with pytest.raises(ValueError):
        res.backward(np.zeros((16, 16, 3)))


# ---------------------------------------------------------------- pose image

def test_pose_image_shoulder_symmetry(humanoid):
    cam = Camera(azimuth=0, elevation=0, distance=2.5, fov_y=60,
                 width=128, height=128)
    pose = Pose.zero(humanoid.n_joints)
    img = render_pose_image(humanoid, pose, cam)
    assert img.shape == (128, 128, 3)

    names = humanoid.joint_names
    joints = posed_joint_positions(humanoid, pose)
    uv, _ = project_points(cam, joints)
    cx, _ = cam.principal_point
    r = uv[names.index("r_shoulder")]
    l = uv[names.index("l_shoulder")]
    assert abs((r[0] - cx) + (l[0] - cx)) < 1.0
    assert abs(r[1] - l[1]) < 1.0
    # the drawn skeleton itself is left-right mirror symmetric
    mask = img.any(axis=2)
    assert (mask != mask[:, ::-1]).mean() < 1e-3


def test_pose_image_raised_arm(humanoid):
    cam = Camera(azimuth=0, elevation=0, distance=2.5, fov_y=60,
                 width=128, height=128)
    pose = Pose.zero(humanoid.n_joints)
    idx = humanoid.joint_names.index("r_shoulder")
    pose.joint_rotations[idx] = [0.0, 0.0, -np.pi / 2]

    joints = posed_joint_positions(humanoid, pose)
    uv, _ = project_points(cam, joints)
    wrist = uv[humanoid.joint_names.index("r_wrist")]
    shoulder = uv[humanoid.joint_names.index("r_shoulder")]
    assert wrist[1] < shoulder[1]  # above = smaller row index

    img = render_pose_image(humanoid, pose, cam)
    assert img.any()


def test_pose_image_deterministic(humanoid):
    cam = Camera(azimuth=40, elevation=10, distance=2.5, fov_y=60,
                 width=96, height=96)
    pose = Pose.zero(humanoid.n_joints)
    pose.joint_rotations[2] = [0.3, -0.2, 0.1]
    a = render_pose_image(humanoid, pose, cam)
    b = render_pose_image(humanoid, pose, cam)
    assert np.array_equal(a, b)


def test_pose_image_requires_keypoint_mapping(humanoid):
    cam = Camera(azimuth=0, elevation=0, distance=2.5, fov_y=60,
                 width=64, height=64)
    pose = Pose.zero(humanoid.n_joints)
    import copy
    broken = copy.deepcopy(humanoid)
    broken.keypoint_map = None
    with pytest.raises(SchemaError):
        render_pose_image(broken, pose, cam)
    partial = copy.deepcopy(humanoid)
    del partial.keypoint_map["nose"]
    with pytest.raises(SchemaError, match="nose"):
        render_pose_image(partial, pose, cam)
