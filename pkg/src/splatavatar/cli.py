"""Command-line entry points.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import load_config
from .distillation import RemoteGuidance, SyntheticPhotometricGuidance
from .io import (SchemaError, load_png, load_pose_sequence, load_template,
                 save_cloud_ply, save_png, toy_humanoid_path)
from .kinematics import BlendWeightField
from .model import Camera, SplatCloud
from .render import render_gaussians
from .trainer import Trainer, load_checkpoint, psnr, render_avatar

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="splatavatar",
        description="Text-to-3D animatable Gaussian-splat avatars.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the optimization loop")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--template", help="rigged template JSON "
                   "(default: bundled toy humanoid)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int, help="shorthand for the seed override")

    p = sub.add_parser("render", help="render one view of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--template")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--size", type=int)
    p.add_argument("--poses", help="pose sequence JSON; canonical if absent")
    p.add_argument("--frame", type=int, default=0)

    p = sub.add_parser("animate", help="render a pose sequence to frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--template")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--size", type=int)

    p = sub.add_parser("export-ply", help="write the splat cloud as PLY")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate-template", help="check a template file")
    p.add_argument("--template", required=True)

    p = sub.add_parser("bench", help="rasterizer throughput")
    p.add_argument("--splats", type=int, default=70000)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _collect_overrides(extra):
    """Turn leftover --a.b.c=v / --a.b.c v argv pairs into override strings."""
    overrides = []
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise UsageError(f"unexpected argument: {token!r}")
        body = token[2:]
        if "=" in body:
            overrides.append(body)
            i += 1
            continue
        if i + 1 >= len(extra) or extra[i + 1].startswith("--"):
            raise UsageError(f"override {token!r} needs a value")
        overrides.append(f"{body}={extra[i + 1]}")
        i += 2
    return overrides


def _load_template_arg(path):
    return load_template(path if path else toy_humanoid_path())


def _make_provider(cfg):
    g = cfg.guidance
    if g.url:
        return RemoteGuidance(g.url, timeout=g.timeout, retries=g.retries)
    if g.synthetic_target:
        target = load_png(g.synthetic_target)
        if target.shape[:2] != (cfg.render_size, cfg.render_size):
            raise UsageError(
                f"synthetic target is {target.shape[1]}x{target.shape[0]}, "
                f"config renders {cfg.render_size}x{cfg.render_size}")
        return SyntheticPhotometricGuidance(
            cfg.schedule, lambda ctx: ctx["crop"].apply(target)), target
    raise UsageError("set guidance.url or guidance.synthetic_target to train")


def cmd_train(args, overrides):
    if args.seed is not None:
        overrides = list(overrides) + [f"seed={args.seed}"]
    cfg = load_config(args.config, overrides)
    template = _load_template_arg(args.template)
    made = _make_provider(cfg)
    provider, target = made if isinstance(made, tuple) else (made, None)
    trainer = Trainer(cfg, template, provider, out_dir=args.out)
    if args.resume:
        trainer.resume(load_checkpoint(args.resume))
    trainer.train()
    if target is not None:
        final = psnr(trainer.eval_image(), target)
        print(f"final PSNR vs target: {final:.2f} dB")
    print(f"trained {trainer.iteration} iterations, "
          f"{len(trainer.cloud)} splats, {trainer.skipped} skipped")
    return 0


def _checkpoint_camera(args, ck, target):
    size = args.size or ck.config.render_size
    v = ck.config.view
    return Camera(azimuth=args.azimuth, elevation=args.elevation,
                  distance=v.distance, fov_y=v.fov_y, width=size,
                  height=size, near=v.near, target=target)


def _avatar_parts(args):
    ck = load_checkpoint(args.checkpoint)
    template = _load_template_arg(args.template)
    if ck.net.out_dim != template.n_joints:
        raise UsageError(
            f"checkpoint was trained on {ck.net.out_dim} joints, "
            f"template has {template.n_joints}")
    field = BlendWeightField(ck.net, ck.template_weights)
    lo, hi = template.vertices.min(axis=0), template.vertices.max(axis=0)
    return ck, template, field, (lo + hi) / 2.0


def cmd_render(args):
    ck, template, field, target = _avatar_parts(args)
    pose = template.canonical_pose
    if args.poses:
        frames = load_pose_sequence(args.poses, template.n_joints)
        if not 0 <= args.frame < len(frames):
            raise UsageError(f"frame {args.frame} outside sequence "
                             f"of {len(frames)}")
        pose = frames[args.frame]
    camera = _checkpoint_camera(args, ck, target)
    result = render_avatar(ck.cloud, template, pose, camera, field=field,
                           background=ck.config.background)
    save_png(result.image, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_animate(args):
    ck, template, field, target = _avatar_parts(args)
    frames = load_pose_sequence(args.poses, template.n_joints)
    camera = _checkpoint_camera(args, ck, target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(frames):
        result = render_avatar(ck.cloud, template, pose, camera, field=field,
                               background=ck.config.background)
        save_png(result.image, out / f"frame_{i:04d}.png")
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_export_ply(args):
    ck = load_checkpoint(args.checkpoint)
    save_cloud_ply(ck.cloud, args.out)
    print(f"wrote {len(ck.cloud)} splats to {args.out}")
    return 0


def cmd_validate_template(args):
    template = load_template(args.template)
    template.validate()
    print(f"ok: {template.n_joints} joints, "
          f"{template.vertices.shape[0]} vertices")
    return 0


def cmd_bench(args):
    rng = np.random.default_rng(args.seed)
    n = args.splats
    quats = rng.standard_normal((n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    cloud = SplatCloud(
        positions=rng.uniform(-0.8, 0.8, size=(n, 3)),
        rotations=quats,
        log_scales=np.log(rng.uniform(0.005, 0.02, size=(n, 3))),
        opacity_logits=rng.normal(size=n),
        colors=rng.uniform(0.0, 1.0, size=(n, 3)),
    )
    camera = Camera(width=args.size, height=args.size)
    from .render import cloud_render_inputs
    inputs = cloud_render_inputs(cloud)
    render_gaussians(*inputs, camera)  # warm the compiled kernels
    t0 = time.perf_counter()
    for _ in range(args.repeats):
        render_gaussians(*inputs, camera)
    dt = time.perf_counter() - t0
    per = dt / args.repeats
    print(f"{n} splats at {args.size}x{args.size}: "
          f"{per * 1000:.1f} ms/frame, {n / per:,.0f} splats/sec")
    return 0


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and argv[0] == "train":
            args, extra = parser.parse_known_args(argv)
            return cmd_train(args, _collect_overrides(extra))
        args = parser.parse_args(argv)
        handler = {
            "render": cmd_render,
            "animate": cmd_animate,
            "export-ply": cmd_export_ply,
            "validate-template": cmd_validate_template,
            "bench": cmd_bench,
        }[args.command]
        return handler(args)
    except (UsageError, SchemaError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - runtime failures
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
