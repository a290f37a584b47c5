"""Regularization losses and total-objective assembly.

Gradients travel as plain dicts keyed by parameter name: the splat cloud's
raw parameter fields by their attribute names, and network parameters as
"net.w{i}" / "net.b{i}". The score-distillation term contributes gradients
only; its proxy magnitude is what gets logged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LossConfig:
    scale_cap: float = 0.01      # r, canonical-space units
    lambda_scale: float = 1000.0
    lambda_skinning: float = 1.0

    def __post_init__(self):
        if self.scale_cap <= 0:
            raise ValueError("scale cap must be positive")
        if self.lambda_scale < 0 or self.lambda_skinning < 0:
            raise ValueError("loss weights must be non-negative")


def net_grad_dict(grads_w, grads_b):
    out = {}
    for i, g in enumerate(grads_w):
        out[f"net.w{i}"] = g
    for i, g in enumerate(grads_b):
        out[f"net.b{i}"] = g
    return out


def scale_loss(cloud, r):
    """Mean excess of each splat's largest scale over the cap r.

    loss = mean_p(max(max_axis(S_p), r) - r); the subgradient touches only
    the argmax axis of splats above the cap.
    Returns (loss, {"log_scales": grad}).
    """
    scales = cloud.scales
    n = scales.shape[0]
    axis = np.argmax(scales, axis=1)
    top = scales[np.arange(n), axis]
    over = top > r
    loss = float(np.maximum(top - r, 0.0).mean())
    grad = np.zeros_like(cloud.log_scales)
    # d scale / d log_scale = scale
    grad[np.arange(n)[over], axis[over]] = top[over] / n
    return loss, {"log_scales": grad}


def skinning_loss(field, positions):
    """Mean squared distance between field weights and cached template rows.

    Returns (loss, grads) with network-parameter gradients only; the splat
    positions act as fixed sample sites for this regularizer.
    """
    w, cache = field.weights(positions)
    diff = w - field.template_weights
    n = positions.shape[0]
    loss = float(np.sum(diff * diff) / n)
    dL_dw = 2.0 * diff / n
    grads_w, grads_b, _ = field.weights_backward(cache, dL_dw)
    return loss, net_grad_dict(grads_w, grads_b)


def accumulate_grads(into, grads, weight=1.0):
    """into[key] += weight * grads[key], creating keys as needed."""
    for key, g in grads.items():
        if key in into:
            into[key] = into[key] + weight * g
        else:
            into[key] = weight * g
    return into


def total_loss(asd_grads, scale_term, skinning_term, cfg):
    """Combine the distillation gradients with the weighted regularizers.

    Args:
        asd_grads: dict of parameter gradients from score distillation.
        scale_term: (value, grads) from scale_loss, or None.
        skinning_term: (value, grads) from skinning_loss, or None.
    Returns:
        (regularizer_value, combined gradient dict). The scalar covers only
        the regularizers; the distillation objective has no loss value.
    """
    combined = {k: v.copy() for k, v in asd_grads.items()}
    value = 0.0
    if scale_term is not None:
        value += cfg.lambda_scale * scale_term[0]
        accumulate_grads(combined, scale_term[1], cfg.lambda_scale)
    if skinning_term is not None:
        value += cfg.lambda_skinning * skinning_term[0]
        accumulate_grads(combined, skinning_term[1], cfg.lambda_skinning)
    return value, combined
