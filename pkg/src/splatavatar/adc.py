"""Adaptive density control: clone, split and prune splats during training.

Every rule is evaluated on a snapshot of the pre-step cloud. High-gradient
splats clone (small) or split (large); under-dense splats clone; pruning
then removes oversized splats and splats that drifted too far from the
template surface, children included. Gradient statistics reset afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import spatial
from .model import SplatCloud, quat_to_rotmat

log = logging.getLogger(__name__)


@dataclass
class ADCConfig:
    interval: int = 100
    grad_threshold: float = 0.02       # mean view-space gradient magnitude
    grad_units: str = "ndc"            # or "pixel"; see trainer accumulation
    knn_k: int = 5
    knn_distance_threshold: float = 0.02
    prune_scale_threshold: float = 0.1
    prune_template_distance: float = 0.1
    clone_scale_limit: float = 0.01    # at most this -> clone, above -> split
    split_scale_divisor: float = 1.6

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("interval must be at least 1")
        for name in ("grad_threshold", "knn_distance_threshold",
                     "prune_scale_threshold", "prune_template_distance",
                     "clone_scale_limit", "split_scale_divisor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.grad_units not in ("ndc", "pixel"):
            raise ValueError(f"unknown grad units: {self.grad_units!r}")


def _sample_within(rng, positions, rotmats, scales):
    """Draw one point from each parent Gaussian."""
    local = rng.standard_normal(positions.shape) * scales
    return positions + np.einsum("nij,nj->ni", rotmats, local)


def adc_step(cloud, template, field, cfg, rng):
    """Apply one density-control pass in place of the given cloud.

    Returns (new_cloud, report). report carries the rule counts, with
    cloned + split - pruned equal to the cloud-size change; source_rows maps
    each surviving row to its pre-step ancestor and is_new flags rows whose
    optimizer state must start fresh. field's cached template-weight rows
    are carried for survivors and looked up fresh for children.
    """
    n = len(cloud)
    mean_grad = cloud.grad_accum / np.maximum(cloud.grad_count, 1)
    scales = cloud.scales
    max_scale = scales.max(axis=1)

    high_grad = mean_grad > cfg.grad_threshold
    clone_mask = high_grad & (max_scale <= cfg.clone_scale_limit)
    split_mask = high_grad & (max_scale > cfg.clone_scale_limit)

    if n > 1:
        k = min(cfg.knn_k, n - 1)
        _, dists = spatial.nearest_neighbors(cloud.positions, k=k)
        sparse_mask = dists.mean(axis=1) > cfg.knn_distance_threshold
    else:
        sparse_mask = np.zeros(n, dtype=bool)
    sparse_mask &= ~high_grad  # one action per splat; gradient rule wins

    clone_src = np.where(clone_mask | sparse_mask)[0]
    split_src = np.where(split_mask)[0]

    # assemble: survivors (everything, split parents replaced by children)
    keep = np.where(~split_mask)[0]
    rot_split = quat_to_rotmat(cloud.rotations[split_src])
    scale_split = scales[split_src]

    def gather(attr):
        arr = getattr(cloud, attr)
        parts = [arr[keep], arr[clone_src]]
        parts += [arr[split_src], arr[split_src]]
        return np.concatenate(parts, axis=0)

    positions = gather("positions")
    rotations = gather("rotations")
    log_scales = gather("log_scales")
    opacity_logits = gather("opacity_logits")
    colors = gather("colors")

    n_keep = len(keep)
    n_clone = len(clone_src)
    n_split = len(split_src)
    child_a = slice(n_keep + n_clone, n_keep + n_clone + n_split)
    child_b = slice(n_keep + n_clone + n_split, None)
    for sl in (child_a, child_b):
        positions[sl] = _sample_within(rng, cloud.positions[split_src],
                                       rot_split, scale_split)
        log_scales[sl] = cloud.log_scales[split_src] - np.log(
            cfg.split_scale_divisor)

    source_rows = np.concatenate([keep, clone_src, split_src, split_src])
    is_new = np.zeros(len(source_rows), dtype=bool)
    is_new[n_keep:] = True

    # prune on the expanded set
    new_scales = np.exp(log_scales)
    _, tdist = spatial.nearest_vertex(template.vertices, positions)
    prune = ((new_scales.max(axis=1) > cfg.prune_scale_threshold)
             | (tdist > cfg.prune_template_distance))
    survive = ~prune
    if not survive.any():
        log.warning("density control would empty the cloud; step skipped")
        report = {"cloned": 0, "split": 0, "pruned": 0,
                  "n_before": n, "n_after": n, "aborted": True}
        cloud.reset_grad_stats()
        return cloud, report, np.arange(n), np.zeros(n, dtype=bool)

    new_cloud = SplatCloud(
        positions=positions[survive],
        rotations=rotations[survive],
        log_scales=log_scales[survive],
        opacity_logits=opacity_logits[survive],
        colors=colors[survive],
    )
    new_cloud.validate()
    source_rows = source_rows[survive]
    is_new = is_new[survive]

    if field is not None:
        old_rows = field.template_weights[source_rows[~is_new]]
        if is_new.any():
            idx, _ = spatial.nearest_vertex(template.vertices,
                                            new_cloud.positions[is_new])
            fresh = template.vertex_skin_weights[idx]
        else:
            fresh = np.zeros((0, field.template_weights.shape[1]))
        rows = np.empty((len(new_cloud), field.template_weights.shape[1]))
        rows[~is_new] = old_rows
        rows[is_new] = fresh
        field.template_weights = rows

    report = {
        "cloned": n_clone,
        "split": n_split,
        "pruned": int(prune.sum()),
        "n_before": n,
        "n_after": len(new_cloud),
        "aborted": False,
    }
    return new_cloud, report, source_rows, is_new
