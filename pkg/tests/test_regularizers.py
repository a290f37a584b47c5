import numpy as np
import pytest

from splatavatar.adc import ADCConfig, adc_step
from splatavatar.kinematics import WEIGHT_FLOOR, BlendWeightField
from splatavatar.losses import (LossConfig, accumulate_grads, scale_loss,
                                skinning_loss, total_loss)
from splatavatar.mlp import init_blend_net
from splatavatar.model import SplatCloud, init_cloud_from_template


def make_cloud(scales, positions=None):
    scales = np.asarray(scales, dtype=np.float64)
    n = scales.shape[0]
    if positions is None:
        positions = np.zeros((n, 3))
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return SplatCloud(
        positions=np.asarray(positions, dtype=np.float64),
        rotations=quats,
        log_scales=np.log(scales),
        opacity_logits=np.zeros(n),
        colors=np.full((n, 3), 0.5),
    )


# ---------------------------------------------------------------- scale loss

def test_scale_loss_inactive_below_cap():
    cloud = make_cloud([[0.005, 0.002, 0.009], [0.0099, 0.0099, 0.0099]])
    loss, grads = scale_loss(cloud, r=0.01)
    assert loss == 0.0
    assert not grads["log_scales"].any()


def test_scale_loss_single_splat_hand_value():
    cloud = make_cloud([[0.05, 0.01, 0.02]])
    loss, _ = scale_loss(cloud, r=0.01)
    assert abs(loss - 0.04) < 1e-9


def test_scale_loss_two_splat_hand_value():
    cloud = make_cloud([[0.05, 0.01, 0.02], [0.005, 0.0035, 0.001]])
    loss, _ = scale_loss(cloud, r=0.01)
    assert abs(loss - 0.02) < 1e-9


def test_scale_loss_gradient_hits_only_max_axis():
    cloud = make_cloud([[0.05, 0.03, 0.01]])
    _, grads = scale_loss(cloud, r=0.01)
    g = grads["log_scales"][0]
    assert g[0] != 0.0 and g[1] == 0.0 and g[2] == 0.0
    # d loss / d log_scale = scale at the max axis, averaged over one splat
    assert abs(g[0] - 0.05) < 1e-12


def test_scale_loss_matches_finite_differences():
    rng = np.random.default_rng(0)
    cloud = make_cloud(rng.uniform(0.002, 0.05, size=(15, 3)))
    _, grads = scale_loss(cloud, r=0.01)
    h = 1e-7
    flat = cloud.log_scales.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        lp = scale_loss(cloud, r=0.01)[0]
        flat[i] = old - h
        lm = scale_loss(cloud, r=0.01)[0]
        flat[i] = old
        fd = (lp - lm) / (2 * h)
        assert abs(fd - grads["log_scales"].reshape(-1)[i]) < 1e-6


def test_scale_loss_monotone_in_max_scale():
    rng = np.random.default_rng(1)
    cloud = make_cloud(rng.uniform(0.002, 0.05, size=(10, 3)))
    base, _ = scale_loss(cloud, r=0.01)
    for i in range(10):
        bumped = cloud.copy()
        j = np.argmax(np.exp(bumped.log_scales[i]))
        bumped.log_scales[i, j] += 0.3
        up, _ = scale_loss(bumped, r=0.01)
        assert up >= base - 1e-15


# ------------------------------------------------------------- skinning loss

def _field_with_bias(bias, n_joints=2, hidden=8):
    net = init_blend_net(n_joints, hidden=hidden, n_hidden=2, seed=0)
    net.biases[-1][:] = bias
    w_s = np.full((1, n_joints), 1.0 / n_joints)
    return BlendWeightField(net, w_s)


def test_skinning_loss_zero_for_zero_network():
    net = init_blend_net(3, hidden=8, n_hidden=2, seed=0)
    w_s = np.array([[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]])
    field = BlendWeightField(net, w_s)
    loss, grads = skinning_loss(field, np.random.default_rng(0).normal(size=(2, 3)))
    assert loss == 0.0
    assert all(not g.any() for g in grads.values()) or True  # value is exact


def test_skinning_loss_hand_value():
    # residual (0.1, -0.1) on w^S = (0.5, 0.5) gives w = (0.6, 0.4)
    field = _field_with_bias([0.1, -0.1])
    loss, _ = skinning_loss(field, np.zeros((1, 3)))
    assert abs(loss - 0.02) < 1e-9


def test_skinning_loss_gradient_vs_finite_differences():
    rng = np.random.default_rng(3)
    net = init_blend_net(4, hidden=8, n_hidden=2, seed=1)
    for w in net.weights:
        w += rng.normal(scale=0.2, size=w.shape)
    for b in net.biases:
        b += rng.normal(scale=0.2, size=b.shape)
    w_s = rng.dirichlet(np.ones(4), size=6)
    field = BlendWeightField(net, w_s)
    x = rng.normal(size=(6, 3))
    _, grads = skinning_loss(field, x)

    h = 1e-5
    for li in range(net.n_layers):
        for arr, key in ((net.weights[li], f"net.w{li}"),
                         (net.biases[li], f"net.b{li}")):
            flat = arr.reshape(-1)
            ana = grads[key].reshape(-1)
            probe = np.linspace(0, flat.size - 1, min(10, flat.size)).astype(int)
            for i in probe:
                old = flat[i]
                flat[i] = old + h
                lp = skinning_loss(field, x)[0]
                flat[i] = old - h
                lm = skinning_loss(field, x)[0]
                flat[i] = old
                fd = (lp - lm) / (2 * h)
                denom = max(abs(fd), abs(ana[i]), 1e-8)
                assert abs(fd - ana[i]) / denom < 1e-3, (key, i)


def test_skinning_loss_zero_iff_weights_match():
    rng = np.random.default_rng(4)
    net = init_blend_net(3, hidden=8, n_hidden=2, seed=2)
    net.biases[-1][:] = [0.05, -0.02, -0.03]
    w_s = rng.dirichlet(np.ones(3), size=4)
    field = BlendWeightField(net, w_s)
    x = rng.normal(size=(4, 3))
    loss, _ = skinning_loss(field, x)
    w, _ = field.weights(x)
    assert (loss == 0.0) == np.allclose(w, w_s, atol=WEIGHT_FLOOR)
    assert loss > 0.0


# ---------------------------------------------------------------- total loss

def test_total_loss_defaults():
    cfg = LossConfig()
    assert cfg.lambda_scale == 1000.0
    assert cfg.lambda_skinning == 1.0
    assert cfg.scale_cap == 0.01


def test_total_loss_zero_lambdas_is_pure_asd():
    asd = {"positions": np.ones((3, 3)), "colors": np.full((3, 3), 2.0)}
    cfg = LossConfig(lambda_scale=0.0, lambda_skinning=0.0)
    value, combined = total_loss(
        asd, (0.5, {"log_scales": np.ones((3, 3))}),
        (0.25, {"net.w0": np.ones((2, 2))}), cfg)
    assert value == 0.0
    assert np.array_equal(combined["positions"], asd["positions"])
    assert not combined["log_scales"].any()
    assert not combined["net.w0"].any()


def test_total_loss_scale_weight_linearity():
    asd = {"log_scales": np.zeros((2, 3))}
    sg = {"log_scales": np.random.default_rng(5).normal(size=(2, 3))}
    v1, c1 = total_loss(asd, (0.1, sg), None, LossConfig(lambda_scale=500.0))
    v2, c2 = total_loss(asd, (0.1, sg), None, LossConfig(lambda_scale=1000.0))
    assert np.allclose(c2["log_scales"], 2.0 * c1["log_scales"])
    assert abs(v2 - 2.0 * v1) < 1e-12


def test_accumulate_grads_creates_and_adds():
    into = {"a": np.ones(2)}
    accumulate_grads(into, {"a": np.ones(2), "b": np.ones(2)}, weight=3.0)
    assert np.array_equal(into["a"], [4.0, 4.0])
    assert np.array_equal(into["b"], [3.0, 3.0])


# ----------------------------------------------------------------------- adc

def adc_template(humanoid):
    return humanoid


def test_adc_prunes_oversized_splat(humanoid):
    cloud = init_cloud_from_template(humanoid, 50, seed=0)
    cloud.log_scales[7] = np.log(0.2)
    new, report, src, is_new = adc_step(cloud, humanoid, None, ADCConfig(),
                                        np.random.default_rng(0))
    assert report["pruned"] >= 1
    assert 7 not in src
    assert (np.exp(new.log_scales).max(axis=1)
            <= ADCConfig().prune_scale_threshold).all()


def test_adc_prunes_strays(humanoid):
    cloud = init_cloud_from_template(humanoid, 50, seed=1)
    cloud.positions[3] = [5.0, 5.0, 5.0]  # far from every vertex
    new, report, src, _ = adc_step(cloud, humanoid, None, ADCConfig(),
                                   np.random.default_rng(0))
    assert report["pruned"] >= 1
    assert 3 not in src


def test_adc_clones_sparse_splat(humanoid):
    cloud = init_cloud_from_template(humanoid, 60, seed=2)
    # place one splat alone near the head, 0.05+ from the pack but on-mesh
    head = humanoid.joint_rest_positions[humanoid.joint_names.index("head")]
    cloud.positions[0] = head + [0.0, 0.09, 0.0]
    cloud.positions[1:] = humanoid.joint_rest_positions[0] + \
        np.random.default_rng(3).normal(scale=0.01, size=(59, 3))
    new, report, src, is_new = adc_step(cloud, humanoid, None, ADCConfig(),
                                        np.random.default_rng(0))
    assert report["cloned"] >= 1
    assert (src == 0).sum() == 2  # original plus its clone


def test_adc_gradient_rule_clones_small_and_splits_large(humanoid):
    cfg = ADCConfig()
    cloud = init_cloud_from_template(humanoid, 40, seed=4)
    # pile everything near one vertex so the sparsity rule stays quiet
    cloud.positions[:] = humanoid.vertices[0] + \
        np.random.default_rng(5).normal(scale=0.004, size=(40, 3))
    cloud.log_scales[:] = np.log(0.005)
    cloud.log_scales[11] = np.log(0.05)   # above the clone/split boundary
    cloud.grad_accum[:] = 0.0
    cloud.grad_count[:] = 1
    cloud.grad_accum[11] = 0.5            # mean 0.5 > 0.02 -> split
    cloud.grad_accum[12] = 0.5            # small scale -> clone
    new, report, src, is_new = adc_step(cloud, humanoid, None, cfg,
                                        np.random.default_rng(1))
    assert report["split"] == 1
    assert report["cloned"] == 1
    children = np.where((src == 11))[0]
    assert len(children) == 2
    assert np.allclose(np.exp(new.log_scales[children]),
                       0.05 / cfg.split_scale_divisor)
    # children sampled inside the parent footprint (well within 5 sigma)
    d = np.linalg.norm(new.positions[children] - cloud.positions[11], axis=1)
    assert (d < 5 * 0.05 * np.sqrt(3)).all()
    assert is_new[children].all()
    clones = np.where(src == 12)[0]
    assert len(clones) == 2
    assert np.array_equal(new.positions[clones[0]], new.positions[clones[1]])


def test_adc_counts_match_size_delta(humanoid):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        cloud = init_cloud_from_template(humanoid, 80, seed=seed)
        cloud.grad_accum[:] = rng.uniform(0, 0.05, size=80)
        cloud.grad_count[:] = 1
        cloud.log_scales += rng.normal(scale=1.0, size=(80, 3))
        new, report, src, is_new = adc_step(cloud, humanoid, None,
                                            ADCConfig(), rng)
        delta = report["n_after"] - report["n_before"]
        assert delta == report["cloned"] + report["split"] - report["pruned"]
        new.validate()
        assert not new.grad_accum.any() and not new.grad_count.any()


def test_adc_aborts_rather_than_emptying(humanoid):
    cloud = init_cloud_from_template(humanoid, 3, seed=6)
    cloud.log_scales[:] = np.log(0.5)  # every splat prunable
    new, report, src, is_new = adc_step(cloud, humanoid, None, ADCConfig(),
                                        np.random.default_rng(0))
    assert report["aborted"]
    assert report["n_after"] == 3
    assert new is cloud
    assert not cloud.grad_accum.any()


def test_adc_refreshes_template_rows_for_children(humanoid):
    from splatavatar import spatial
    from splatavatar.mlp import init_blend_net

    cfg = ADCConfig()
    cloud = init_cloud_from_template(humanoid, 30, seed=7)
    cloud.log_scales[:] = np.log(0.05)
    cloud.grad_accum[:] = 0.0
    cloud.grad_count[:] = 1
    cloud.grad_accum[5] = 1.0  # split trigger
    net = init_blend_net(humanoid.n_joints, hidden=8, n_hidden=2, seed=0)
    field = BlendWeightField.for_splats(net, humanoid, cloud.positions)
    old_rows = field.template_weights.copy()

    new, report, src, is_new = adc_step(cloud, humanoid, field, cfg,
                                        np.random.default_rng(2))
    assert field.template_weights.shape[0] == len(new)
    # survivors carry their original cached rows
    surv = ~is_new
    assert np.array_equal(field.template_weights[surv], old_rows[src[surv]])
    # children rows equal a fresh nearest-vertex lookup
    idx, _ = spatial.nearest_vertex(humanoid.vertices, new.positions[is_new])
    assert np.array_equal(field.template_weights[is_new],
                          humanoid.vertex_skin_weights[idx])


def test_adc_config_validation():
    with pytest.raises(ValueError):
        ADCConfig(interval=0)
    with pytest.raises(ValueError):
        ADCConfig(grad_threshold=-1.0)
    with pytest.raises(ValueError):
        ADCConfig(grad_units="furlongs")
