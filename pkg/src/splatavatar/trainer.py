"""End-to-end optimization loop: sampling, rendering, guidance, updates.

Each iteration draws from `default_rng([seed, iteration])`, so the stream is
a pure function of the base seed and the iteration index. That makes
checkpoint resume exact: no generator state needs to survive a restart.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import spatial
from .adc import adc_step
from .config import TrainConfig, config_from_dict, config_hash, config_to_dict
from .distillation import (GuidanceUnavailableError, add_noise, asd_delta,
                           sds_gradient, seeded_noise_field, to_working_range)
from .kinematics import BlendWeightField, bone_transforms, deform, deform_backward
from .losses import accumulate_grads, net_grad_dict, scale_loss, skinning_loss, total_loss
from .mlp import FeedForwardNet, init_blend_net
from .model import Camera, Pose, SplatCloud, init_cloud_from_template, quat_to_rotmat
from .render import chain_cloud_grads, render_gaussians, render_pose_image

log = logging.getLogger(__name__)

SPLAT_KEYS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


# ------------------------------------------------------------------ sampling

def sample_pose(rng, template, scale=0.3, mean=None):
    """Gaussian perturbation of the mean pose; root translation stays zero."""
    if mean is None:
        mean = template.star_pose or template.canonical_pose
    noise = rng.standard_normal(mean.joint_rotations.shape) * scale
    return Pose(mean.joint_rotations + noise, np.zeros(3))


def view_tag(azimuth):
    """Quadrant label for an azimuth in degrees (0 front, +90 side-right)."""
    a = (azimuth + 180.0) % 360.0 - 180.0
    if -45.0 <= a < 45.0:
        return "front"
    if 45.0 <= a < 135.0:
        return "side-right"
    if -135.0 <= a < -45.0:
        return "side-left"
    return "back"


def sample_view(rng, cfg, canonical, size, target):
    """One training camera. Canonical branch locks onto the front/back axis."""
    v = cfg.view
    if canonical:
        azimuth = 0.0 if rng.random() < 0.5 else 180.0
        elevation = 0.0
    else:
        azimuth = rng.uniform(v.azimuth_min, v.azimuth_max)
        elevation = rng.uniform(v.elevation_min, v.elevation_max)
    return Camera(azimuth=azimuth, elevation=elevation, distance=v.distance,
                  fov_y=v.fov_y, width=size, height=size, near=v.near,
                  target=target)


# ------------------------------------------------------------ view prompting

VIEW_ANCHORS = (("front", 0.0), ("side-right", 90.0),
                ("back", 180.0), ("side-left", -90.0))
VIEW_DESCRIPTORS = {"front": "front view", "side-right": "side view",
                    "back": "back view", "side-left": "side view"}


def anchor_weights(azimuth):
    """Two bracketing 90-degree anchors and their linear weights.

    Returns ((name_lo, w_lo), (name_hi, w_hi)) with w_lo + w_hi = 1.
    """
    a = (azimuth + 180.0) % 360.0 - 180.0
    ordered = [("side-left", -90.0), ("front", 0.0),
               ("side-right", 90.0), ("back", 180.0)]
    if a < -90.0:  # between back (wrapped to -180) and side-left
        lo, hi = ("back", -180.0), ("side-left", -90.0)
    else:
        for (n0, a0), (n1, a1) in zip(ordered, ordered[1:]):
            if a0 <= a <= a1:
                lo, hi = (n0, a0), (n1, a1)
                break
    (name_lo, a_lo), (name_hi, _) = lo, hi
    w_hi = (a - a_lo) / 90.0
    return (name_lo, 1.0 - w_hi), (name_hi, w_hi)


class ViewPrompter:
    """Pre-encoded view-augmented prompts, one handle per camera azimuth.

    Providers that expose `blend_prompts(id_a, id_b, weight_a)` get an
    interpolated handle; everyone else gets the nearest anchor.
    """

    def __init__(self, provider, prompt, enabled=True):
        self.enabled = enabled
        self.blend = getattr(provider, "blend_prompts", None)
        if enabled:
            self.ids = {name: provider.encode_prompt(
                f"{prompt}, {VIEW_DESCRIPTORS[name]}")
                for name, _ in VIEW_ANCHORS}
        else:
            self.base = provider.encode_prompt(prompt)

    def handle(self, azimuth):
        if not self.enabled:
            return self.base
        (lo, w_lo), (hi, w_hi) = anchor_weights(azimuth)
        if self.blend is not None and 0.0 < w_lo < 1.0:
            return self.blend(self.ids[lo], self.ids[hi], w_lo)
        return self.ids[lo] if w_lo >= w_hi else self.ids[hi]


# ------------------------------------------------------------------ cropping

@dataclass
class CropMeta:
    y: int
    x: int
    height: int
    width: int
    full_height: int
    full_width: int

    def apply(self, image):
        return image[self.y:self.y + self.height, self.x:self.x + self.width]

    def scatter(self, grad_patch):
        """Embed a patch gradient into a zero full-image gradient."""
        full = np.zeros((self.full_height, self.full_width)
                        + grad_patch.shape[2:])
        full[self.y:self.y + self.height,
             self.x:self.x + self.width] = grad_patch
        return full


_warned_small = False


def crop_patch(image, rng, size, alpha=None, alpha_floor=0.01):
    """Random crop with its origin inside the subject's alpha bounding box.

    The bbox is intersected with origins that keep the patch in frame
    (clamped so the range is never empty). Images smaller than the patch
    pass through whole.
    """
    global _warned_small
    h, w = image.shape[:2]
    if h < size or w < size:
        if not _warned_small:
            log.warning("image %dx%d smaller than patch %d; using full image",
                        h, w, size)
            _warned_small = True
        return image, CropMeta(0, 0, h, w, h, w)
    lo_y, hi_y, lo_x, hi_x = 0, h - size, 0, w - size
    if alpha is not None:
        ys, xs = np.nonzero(alpha > alpha_floor)
        if ys.size:
            lo_y, hi_y = min(int(ys.min()), h - size), min(int(ys.max()), h - size)
            lo_x, hi_x = min(int(xs.min()), w - size), min(int(xs.max()), w - size)
    y = int(rng.integers(lo_y, hi_y + 1))
    x = int(rng.integers(lo_x, hi_x + 1))
    meta = CropMeta(y, x, size, size, h, w)
    return meta.apply(image), meta


# ----------------------------------------------------------------- optimizer

class Adam:
    """Bias-corrected Adam over a dict of named parameter arrays.

    Non-finite gradients skip that array's update and bump `nan_skips`;
    everything else is the standard update. Moments are created lazily so
    parameter sets may grow (new keys) without ceremony.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}
        self.nan_skips = 0

    def step(self, params, grads, lr):
        for key, g in grads.items():
            p = params[key]
            if not np.all(np.isfinite(g)):
                self.nan_skips += 1
                log.warning("non-finite gradient for %s; update skipped", key)
                continue
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
                self.t[key] = 0
            self.t[key] += 1
            m, v, t = self.m[key], self.v[key], self.t[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m if self.beta1 == 0.0 else m / (1.0 - self.beta1 ** t)
            v_hat = v if self.beta2 == 0.0 else v / (1.0 - self.beta2 ** t)
            p -= lr[key] * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap_rows(self, keys, source_rows, is_new):
        """Re-index per-splat moments after a density-control step."""
        for key in keys:
            if key not in self.m:
                continue
            for store in (self.m, self.v):
                arr = store[key][source_rows]
                arr[is_new] = 0.0
                store[key] = arr

    def state_dict(self):
        out = {"nan_skips": self.nan_skips}
        for key in self.m:
            out[f"m.{key}"] = self.m[key]
            out[f"v.{key}"] = self.v[key]
            out[f"t.{key}"] = self.t[key]
        return out

    def load_state_dict(self, d):
        self.m, self.v, self.t = {}, {}, {}
        self.nan_skips = int(d["nan_skips"])
        for name, value in d.items():
            if "." not in name:
                continue
            kind, _, key = name.partition(".")
            if kind == "m":
                self.m[key] = np.array(value, dtype=np.float64)
            elif kind == "v":
                self.v[key] = np.array(value, dtype=np.float64)
            elif kind == "t":
                self.t[key] = int(value)


# ----------------------------------------------------------------- rendering

def template_weights_for(template, positions):
    """Nearest-vertex skinning weights, the w^S lookup, for raw clouds."""
    idx, _ = spatial.nearest_vertex(template.vertices, positions)
    return template.vertex_skin_weights[idx]


def render_avatar(cloud, template, pose, camera, weights=None, field=None,
                  background=(0.0, 0.0, 0.0)):
    """Pose and render a splat cloud.

    Blend weights come from `weights`, else `field`, else a fresh
    nearest-vertex lookup. The exact canonical pose skips deformation
    entirely, which keeps pure appearance runs independent of kinematics.
    """
    rotmats = quat_to_rotmat(cloud.rotations)
    if pose.same_as(template.canonical_pose):
        x_o, r_o = cloud.positions, rotmats
    else:
        if weights is None:
            if field is not None:
                weights, _ = field.weights(cloud.positions)
            else:
                weights = template_weights_for(template, cloud.positions)
        bones = bone_transforms(template, pose)
        x_o, r_o, _ = deform(cloud.positions, rotmats, weights, bones)
    return render_gaussians(x_o, r_o, cloud.scales, cloud.opacities,
                            cloud.colors, camera, background=background)


# ---------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    cloud: SplatCloud
    net: FeedForwardNet
    template_weights: np.ndarray
    adam_state: dict
    iteration: int
    skipped: int
    config: TrainConfig
    config_hash: str


def save_checkpoint(path, trainer):
    flat = {
        "iteration": trainer.iteration,
        "skipped": trainer.skipped,
        "config_json": json.dumps(config_to_dict(trainer.config),
                                  sort_keys=True),
        "config_hash": trainer.config_hash,
        "field.template_weights": trainer.field.template_weights,
    }
    for key in SPLAT_KEYS + ("grad_accum", "grad_count"):
        flat[f"cloud.{key}"] = getattr(trainer.cloud, key)
    for name, arr in trainer.net.state_dict().items():
        flat[f"net.{name}"] = arr
    for name, value in trainer.optim.state_dict().items():
        flat[f"adam.{name}"] = value
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **flat)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        cloud = SplatCloud(
            positions=data["cloud.positions"],
            rotations=data["cloud.rotations"],
            log_scales=data["cloud.log_scales"],
            opacity_logits=data["cloud.opacity_logits"],
            colors=data["cloud.colors"],
            grad_accum=data["cloud.grad_accum"],
            grad_count=data["cloud.grad_count"],
        )
        net = FeedForwardNet.from_state_dict(
            {k[len("net."):]: v for k, v in data.items()
             if k.startswith("net.")})
        adam_state = {k[len("adam."):]: v for k, v in data.items()
                      if k.startswith("adam.")}
        cfg = config_from_dict(TrainConfig,
                               json.loads(str(data["config_json"])))
        return Checkpoint(
            cloud=cloud,
            net=net,
            template_weights=data["field.template_weights"],
            adam_state=adam_state,
            iteration=int(data["iteration"]),
            skipped=int(data["skipped"]),
            config=cfg,
            config_hash=str(data["config_hash"]),
        )


# -------------------------------------------------------------------- loop

class Trainer:
    """Owns the avatar state and runs score-distillation iterations.

    `out_dir`, when given, receives a config snapshot, `log.jsonl` with one
    structured record per iteration, and periodic checkpoints under
    `checkpoints/`. Records also accumulate on `self.records` for callers.
    """

    def __init__(self, config, template, provider, out_dir=None):
        template.validate()
        self.config = config
        self.template = template
        self.provider = provider
        self.config_hash = config_hash(config)
        self.cloud = init_cloud_from_template(template, config.n_splats,
                                              seed=config.seed)
        self.net = init_blend_net(template.n_joints, hidden=config.net_hidden,
                                  n_hidden=config.net_layers, seed=config.seed)
        self.field = BlendWeightField.for_splats(self.net, template,
                                                 self.cloud.positions)
        self.optim = Adam(config.beta1, config.beta2, config.adam_eps)
        self.prompter = ViewPrompter(provider, config.prompt,
                                     enabled=config.view_prompting)
        self.negative_id = (provider.encode_prompt(config.negative_prompt)
                            if config.negative_prompt else None)
        if config.pose_mean == "star" and template.star_pose is not None:
            self.mean_pose = template.star_pose
        else:
            self.mean_pose = template.canonical_pose
        lo = template.vertices.min(axis=0)
        hi = template.vertices.max(axis=0)
        self.camera_target = (lo + hi) / 2.0
        self.iteration = 0
        self.skipped = 0
        self.records = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "checkpoints").mkdir(exist_ok=True)
            from .config import save_config
            save_config(config, self.out_dir / "config.yaml")

    # -- state plumbing ----------------------------------------------------

    def params(self):
        p = {key: getattr(self.cloud, key) for key in SPLAT_KEYS}
        for i in range(self.net.n_layers):
            p[f"net.w{i}"] = self.net.weights[i]
            p[f"net.b{i}"] = self.net.biases[i]
        return p

    def learning_rates(self, iteration):
        cfg = self.config
        frac = iteration / max(cfg.iterations, 1)
        lr_pos = cfg.lr.position * (cfg.lr.position_final
                                    / cfg.lr.position) ** frac
        lr_net = cfg.lr.net * cfg.lr.net_decay ** frac
        rates = {
            "positions": lr_pos,
            "rotations": cfg.lr.rotation,
            "log_scales": cfg.lr.scale,
            "opacity_logits": cfg.lr.opacity,
            "colors": cfg.lr.color,
        }
        for i in range(self.net.n_layers):
            rates[f"net.w{i}"] = lr_net
            rates[f"net.b{i}"] = lr_net
        return rates

    def resume(self, checkpoint):
        if checkpoint.config_hash != self.config_hash:
            raise ValueError("checkpoint was produced by a different config")
        self.cloud = checkpoint.cloud
        self.net = checkpoint.net
        self.field = BlendWeightField(self.net, checkpoint.template_weights)
        self.optim.load_state_dict(checkpoint.adam_state)
        self.iteration = checkpoint.iteration
        self.skipped = checkpoint.skipped

    # -- core iteration ----------------------------------------------------

    def run_iteration(self, i):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, i])
        canonical = rng.random() < cfg.canonical_prob
        camera = sample_view(rng, cfg, canonical, cfg.render_size,
                             self.camera_target)
        if canonical:
            pose = self.template.canonical_pose
        else:
            pose = sample_pose(rng, self.template, cfg.pose_scale,
                               self.mean_pose)
        tag = view_tag(camera.azimuth)

        # forward: deform (unless exactly canonical), render, crop
        rotmats = quat_to_rotmat(self.cloud.rotations)
        if pose.same_as(self.template.canonical_pose):
            x_o, r_o, dcache, wcache = self.cloud.positions, rotmats, None, None
        else:
            w, wcache = self.field.weights(self.cloud.positions)
            bones = bone_transforms(self.template, pose)
            x_o, r_o, dcache = deform(self.cloud.positions, rotmats, w, bones)
        result = render_gaussians(x_o, r_o, self.cloud.scales,
                                  self.cloud.opacities, self.cloud.colors,
                                  camera, background=cfg.background)
        patch, meta = crop_patch(result.image, rng, cfg.patch_size,
                                 alpha=result.alpha)
        x = to_working_range(patch)

        # guidance
        t = cfg.schedule.sample_timestep(i, rng)
        eps_seed = int(rng.integers(0, 2 ** 31 - 1))
        eps = seeded_noise_field(eps_seed, x.shape[0], x.shape[1])
        x_t = add_noise(cfg.schedule, x, t, eps)
        pose_image = render_pose_image(self.template, pose, camera)
        self.provider.begin_iteration({
            "iteration": i, "pose": pose, "camera": camera, "crop": meta,
            "branch": "canonical" if canonical else "random", "view": tag,
        })
        prompt_id = self.prompter.handle(camera.azimuth)
        try:
            eps_cond = self.provider.predict_noise(
                x_t, t, prompt_id, pose_image, seed=eps_seed)
            eps_uncond = self.provider.predict_noise(
                x_t, t, self.negative_id, pose_image, seed=eps_seed)
        except GuidanceUnavailableError as exc:
            self.skipped += 1
            log.warning("iteration %d skipped: %s", i, exc)
            if self.skipped > cfg.skip_budget:
                raise RuntimeError(
                    f"guidance unavailable {self.skipped} times; aborting"
                ) from exc
            return {"iter": i, "skipped": True, "error": str(exc),
                    "n_splats": len(self.cloud)}
        delta = asd_delta(eps_cond, eps_uncond, eps, t, cfg.asd)

        # backward: image gradient -> splat and net parameter gradients
        state = {}

        def backward_fn(dL_dx):
            dL_dimage = meta.scatter(2.0 * dL_dx)  # working range is 2p - 1
            ggrads = result.backward(dL_dimage)
            state["view_grad_norm"] = ggrads.view_grad_norm
            state["touched"] = ggrads.touched
            grads = None
            if dcache is not None:
                g_xc, g_rc, g_w = deform_backward(dcache, ggrads.positions,
                                                  ggrads.rotations)
                gw, gb, g_x_field = self.field.weights_backward(wcache, g_w)
                ggrads.positions = g_xc + g_x_field
                ggrads.rotations = g_rc
                grads = chain_cloud_grads(self.cloud, ggrads)
                accumulate_grads(grads, net_grad_dict(gw, gb))
            else:
                grads = chain_cloud_grads(self.cloud, ggrads)
            return grads

        asd_grads = sds_gradient(delta, cfg.schedule.weight(t), backward_fn,
                                 x.shape)
        self.cloud.grad_accum += state["view_grad_norm"]
        self.cloud.grad_count += state["touched"]

        # regularizers
        scale_term = scale_loss(self.cloud, cfg.loss.scale_cap)
        skinning_term = None
        skin_value = 0.0
        if cfg.loss.lambda_skinning > 0.0:
            skinning_term = skinning_loss(self.field, self.cloud.positions)
            skin_value = skinning_term[0]
        _, grads = total_loss(asd_grads, scale_term, skinning_term, cfg.loss)

        self.optim.step(self.params(), grads, self.learning_rates(i))
        norms = np.linalg.norm(self.cloud.rotations, axis=1, keepdims=True)
        self.cloud.rotations /= norms

        record = {
            "iter": i,
            "branch": "canonical" if canonical else "random",
            "view": tag,
            "t": t,
            "delta_norm": float(np.linalg.norm(delta)),
            "scale_loss": scale_term[0],
            "skinning_loss": skin_value,
            "n_splats": len(self.cloud),
            "nan_skips": self.optim.nan_skips,
            "adc": None,
        }

        # density control
        if cfg.adc.interval > 0 and (i + 1) % cfg.adc.interval == 0:
            new_cloud, report, src, is_new = adc_step(
                self.cloud, self.template, self.field, cfg.adc, rng)
            record["adc"] = report
            record["n_splats"] = len(new_cloud)
            if not report["aborted"]:
                self.optim.remap_rows(SPLAT_KEYS, src, is_new)
                self.cloud = new_cloud
        return record

    # -- driver ------------------------------------------------------------

    def train(self):
        cfg = self.config
        if self.out_dir is not None and self._log_fh is None:
            self._log_fh = open(self.out_dir / "log.jsonl", "a")
        try:
            for i in range(self.iteration, cfg.iterations):
                record = self.run_iteration(i)
                self.iteration = i + 1
                self.records.append(record)
                if self._log_fh is not None:
                    self._log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                    self._log_fh.flush()
                due = cfg.checkpoint_every > 0 and \
                    self.iteration % cfg.checkpoint_every == 0
                if self.out_dir is not None and due:
                    save_checkpoint(self.out_dir / "checkpoints"
                                    / f"ckpt_{self.iteration:06d}.npz", self)
            if self.out_dir is not None:
                save_checkpoint(self.out_dir / "checkpoints" / "final.npz",
                                self)
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        return Checkpoint(
            cloud=self.cloud, net=self.net,
            template_weights=self.field.template_weights,
            adam_state=self.optim.state_dict(), iteration=self.iteration,
            skipped=self.skipped, config=cfg, config_hash=self.config_hash)

    def eval_image(self, pose=None, azimuth=0.0, elevation=0.0, size=None):
        """Deterministic render of the current avatar for metrics."""
        cfg = self.config
        camera = Camera(azimuth=azimuth, elevation=elevation,
                        distance=cfg.view.distance, fov_y=cfg.view.fov_y,
                        width=size or cfg.render_size,
                        height=size or cfg.render_size, near=cfg.view.near,
                        target=self.camera_target)
        pose = pose if pose is not None else self.template.canonical_pose
        return render_avatar(self.cloud, self.template, pose, camera,
                             field=self.field,
                             background=cfg.background).image
