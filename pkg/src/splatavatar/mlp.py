"""Small fully-connected network with hand-rolled forward/backward.

Used for the residual blend-weight field: 3 -> 128 x4 -> B, softplus hidden
activations, linear output. The final layer is zero-initialized so the
residual starts exactly at zero.
"""

from __future__ import annotations

import numpy as np


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_grad(x):
    # d softplus / dx = sigmoid(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class FeedForwardNet:
    """Plain MLP: weights[i] is (fan_in, fan_out), applied as x @ W + b."""

    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ValueError(f"layer {i} -> {i + 1} shape mismatch")

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def n_params(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def param_arrays(self):
        """Flat list of parameter arrays (weights then bias per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self):
        return FeedForwardNet([w.copy() for w in self.weights],
                              [b.copy() for b in self.biases])

    def state_dict(self):
        d = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            d[f"w{i}"] = w
            d[f"b{i}"] = b
        return d

    @classmethod
    def from_state_dict(cls, d):
        n = len(d) // 2
        return cls([d[f"w{i}"] for i in range(n)], [d[f"b{i}"] for i in range(n)])


def init_blend_net(out_dim, in_dim=3, hidden=128, n_hidden=4, seed=0):
    """He-initialized hidden layers, zero-initialized output layer."""
    rng = np.random.default_rng(seed)
    dims = [in_dim] + [hidden] * n_hidden + [out_dim]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        if i == len(dims) - 2:
            w = np.zeros((dims[i], dims[i + 1]))
        else:
            w = rng.standard_normal((dims[i], dims[i + 1])) * np.sqrt(2.0 / dims[i])
        weights.append(w)
        biases.append(np.zeros(dims[i + 1]))
    return FeedForwardNet(weights, biases)


def mlp_forward(net, x):
    """Evaluate the net on (N, in_dim) inputs.

    Returns (output (N, out_dim), cache for mlp_backward).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"expected (N, {net.in_dim}) input, got {x.shape}")
    pre = []  # pre-activation per layer
    acts = [x]  # post-activation inputs per layer
    h = x
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else softplus(z)
        acts.append(h)
    return h, (pre, acts)


def mlp_backward(net, cache, upstream):
    """Reverse-mode gradients.

    Args:
        cache: as returned by mlp_forward.
        upstream: (N, out_dim) dL/doutput.
    Returns:
        (grads_w, grads_b, grad_x): per-layer parameter gradients and the
        gradient wrt the network input.
    """
    pre, acts = cache
    g = np.asarray(upstream, dtype=np.float64)
    grads_w = [None] * net.n_layers
    grads_b = [None] * net.n_layers
    last = net.n_layers - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * softplus_grad(pre[i])
        grads_w[i] = acts[i].T @ g
        grads_b[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return grads_w, grads_b, g
