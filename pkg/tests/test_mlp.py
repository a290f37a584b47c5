import numpy as np
import pytest

from splatavatar.mlp import FeedForwardNet, init_blend_net, mlp_backward, mlp_forward

from testutil import fd_gradient, assert_close_rel


def small_net(seed=0, out_dim=4):
    net = init_blend_net(out_dim, hidden=8, n_hidden=2, seed=seed)
    rng = np.random.default_rng(seed + 1)
    # random final layer so gradients are informative
    net.weights[-1] = rng.standard_normal(net.weights[-1].shape) * 0.3
    net.biases[-1] = rng.standard_normal(net.biases[-1].shape) * 0.1
    return net


def test_zero_init_outputs_zero():
    net = init_blend_net(24, seed=0)
    rng = np.random.default_rng(0)
    out, _ = mlp_forward(net, rng.standard_normal((10, 3)))
    assert np.all(out == 0.0)


def test_batch_independence():
    net = small_net()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((7, 3))
    full, _ = mlp_forward(net, x)
    rows = np.stack([mlp_forward(net, x[i:i + 1])[0][0] for i in range(7)])
    # BLAS may take different code paths per batch shape; allow rounding noise
    np.testing.assert_allclose(full, rows, rtol=1e-13, atol=1e-13)


def test_forward_matches_scalar_reference():
    net = small_net(seed=5)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3))
    out, _ = mlp_forward(net, x)

    def softplus_scalar(v):
        return max(v, 0.0) + np.log1p(np.exp(-abs(v)))

    for n in range(x.shape[0]):
        h = list(x[n])
        for li in range(net.n_layers):
            w, b = net.weights[li], net.biases[li]
            z = [sum(h[i] * w[i, j] for i in range(w.shape[0])) + b[j]
                 for j in range(w.shape[1])]
            h = z if li == net.n_layers - 1 else [softplus_scalar(v) for v in z]
        assert np.abs(np.array(h) - out[n]).max() < 1e-6


def test_backward_finite_difference():
    net = small_net(seed=7)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 3))
    G = rng.standard_normal((6, net.out_dim))

    out, cache = mlp_forward(net, x)
    gw, gb, gx = mlp_backward(net, cache, G)

    for li in range(net.n_layers):
        def loss_w(wv, li=li):
            saved = net.weights[li]
            net.weights[li] = wv
            val = float(np.sum(mlp_forward(net, x)[0] * G))
            net.weights[li] = saved
            return val

        numeric = fd_gradient(loss_w, net.weights[li].copy(), h=1e-4)
        assert_close_rel(gw[li], numeric, 1e-3)

        def loss_b(bv, li=li):
            saved = net.biases[li]
            net.biases[li] = bv
            val = float(np.sum(mlp_forward(net, x)[0] * G))
            net.biases[li] = saved
            return val

        numeric = fd_gradient(loss_b, net.biases[li].copy(), h=1e-4)
        assert_close_rel(gb[li], numeric, 1e-3)

    def loss_x(xv):
        return float(np.sum(mlp_forward(net, xv)[0] * G))

    numeric = fd_gradient(loss_x, x.copy(), h=1e-4)
    assert_close_rel(gx, numeric, 1e-3)


def test_zero_upstream_zero_grads():
    net = small_net()
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 3))
    _, cache = mlp_forward(net, x)
    gw, gb, gx = mlp_backward(net, cache, np.zeros((6, net.out_dim)))
    assert all(np.all(g == 0) for g in gw)
    assert all(np.all(g == 0) for g in gb)
    assert np.all(gx == 0)


def test_gradient_sums_over_batch():
    net = small_net(seed=9)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 3))
    G = rng.standard_normal((5, net.out_dim))
    _, cache = mlp_forward(net, x)
    gw_full, gb_full, _ = mlp_backward(net, cache, G)
    gw_sum = [np.zeros_like(w) for w in net.weights]
    gb_sum = [np.zeros_like(b) for b in net.biases]
    for i in range(5):
        _, ci = mlp_forward(net, x[i:i + 1])
        gw, gb, _ = mlp_backward(net, ci, G[i:i + 1])
        for a, b_ in zip(gw_sum, gw):
            a += b_
        for a, b_ in zip(gb_sum, gb):
            a += b_
    for a, b_ in zip(gw_full, gw_sum):
        assert np.abs(a - b_).max() < 1e-12
    for a, b_ in zip(gb_full, gb_sum):
        assert np.abs(a - b_).max() < 1e-12


def test_bounded_inputs_stay_finite():
    net = init_blend_net(24, seed=0)
    rng = np.random.default_rng(1)
    for layer in net.weights[:-1]:
        layer += rng.standard_normal(layer.shape) * 0.01
    x = rng.uniform(-10, 10, size=(64, 3))
    out, _ = mlp_forward(net, x)
    assert np.all(np.isfinite(out))


def test_shape_mismatch_rejected():
    net = small_net()
    with pytest.raises(ValueError):
        mlp_forward(net, np.zeros((3, 5)))


def test_state_dict_roundtrip():
    net = small_net(seed=11)
    back = FeedForwardNet.from_state_dict(net.state_dict())
    assert all(np.array_equal(a, b) for a, b in zip(net.weights, back.weights))
    assert all(np.array_equal(a, b) for a, b in zip(net.biases, back.biases))
