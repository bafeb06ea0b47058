"""Command-line entry point: ``compinv <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure (one ``error: ...`` line on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import images
from .editing import CompositeScene, DirectionRegistry, apply_edit, remove_ood, render_novel_view
from .inversion import InversionResult, PipelineConfig, run_pipeline, write_manifest
from .metrics import compute_psnr_ssim, write_report
from .renderer import Camera
from .tensorlab import set_threads
from .toygen import DatasetConfig, PretrainConfig, ToyGenerator, generate_dataset, load_dataset, pretrain_generator

log = logging.getLogger("compinv")


class UsageError(Exception):
    pass


def _config(cls, path, seed):
    cfg = cls.parse(Path(path).read_text(encoding="utf-8")) if path else cls()
    if seed is not None:
        cfg.seed = seed
    return cfg


def _generator(args, result: InversionResult | None = None) -> ToyGenerator:
    path = args.gen or (result.generator_path if result is not None else "")
    if not path:
        raise UsageError("no generator: pass --gen")
    gen = ToyGenerator.load(path)
    if result is not None and result.generator_hash and gen.content_hash() != result.generator_hash:
        raise ValueError(f"generator {path} does not match the one used for the checkpoint")
    return gen


def _scene(args) -> tuple[CompositeScene, object]:
    result = InversionResult.load(args.inv)
    ds = load_dataset(args.dataset, load_hr=False)
    scene = CompositeScene(_generator(args, result), result, ds.config, [f.camera for f in ds.frames])
    return scene, ds


def _frame(scene: CompositeScene, t: int) -> int:
    if not 0 <= t < len(scene):
        raise ValueError(f"frame {t} out of range [0, {len(scene)})")
    return t


def _save(path, img) -> None:
    images.write_image(path, img)
    print(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> None:
    cfg = _config(PretrainConfig, args.config, args.seed)
    if args.point_iters is not None:
        cfg.point_iters = args.point_iters
    if args.render_iters is not None:
        cfg.render_iters = args.render_iters
    gen = pretrain_generator(cfg, args.out)
    print(f"{args.out} {gen.content_hash()}")


def cmd_gen_dataset(args) -> None:
    cfg = _config(DatasetConfig, args.config, args.seed)
    bundle = generate_dataset(cfg, args.out)
    print(f"{args.out} {len(bundle)} frames")


def cmd_invert(args) -> None:
    cfg = _config(PipelineConfig, args.config, args.seed)
    if args.clip:
        cfg.grad_clip = 10.0
    resume = None
    if args.resume:
        resume = InversionResult.load(args.resume)
        if args.config is None:
            cfg = resume.config
            if args.seed is not None:
                cfg.seed = args.seed
        resume.config = cfg
    stages = args.stage or ("ABC" if resume is None else "ABC"["ABC".index(resume.stage) + 1:])
    if not stages:
        raise ValueError("checkpoint already finished stage C; pass --stage to rerun a stage")
    gen = _generator(args, resume)
    ds = load_dataset(args.dataset, load_hr="C" in stages.upper())
    result = run_pipeline(ds, gen, cfg, stages, resume=resume)
    result.generator_path = str(Path(args.gen).resolve()) if args.gen else result.generator_path
    result.save(args.out)
    write_manifest(str(args.out) + ".manifest.txt", result, {"dataset": Path(args.dataset).resolve()})
    print(f"{args.out} stage {result.stage}")


def cmd_render(args) -> None:
    scene, _ = _scene(args)
    t = _frame(scene, args.frame)
    _save(args.out, scene.render_hr(t) if args.hr else scene.render(t).color)


def cmd_edit(args) -> None:
    scene, _ = _scene(args)
    t = _frame(scene, args.frame)
    shape = scene.generator.latent_shape
    registry = (DirectionRegistry.load(args.registry, shape) if args.registry
                else DirectionRegistry.from_latent_map(scene.generator.latent_map))
    if args.write_registry:
        registry.save(args.write_registry)
    direction = registry.get(args.direction)
    w = apply_edit(scene.latent(t), direction, args.strength)
    out = scene.render(t, latent=w).color
    _save(args.out, out)


def cmd_remove_ood(args) -> None:
    scene, _ = _scene(args)
    t = _frame(scene, args.frame)
    _save(args.out, remove_ood(scene).render(t).color)


def cmd_novel_view(args) -> None:
    scene, ds = _scene(args)
    t = _frame(scene, args.frame)
    cfg = ds.config
    cam = Camera.orbit(args.yaw, args.pitch, args.radius or cfg.camera_distance, cfg.focal)
    _save(args.out, render_novel_view(scene, cam, t, high_res=not args.low_res))


def cmd_eval(args) -> None:
    before = Path(args.inv).read_bytes()
    scene, ds = _scene(args)
    rows = []
    for t, fr in enumerate(ds.frames):
        out = scene.render(t).color
        rows.append(compute_psnr_ssim(fr.image, out, fr.mask, frame=t))
    write_report(args.report, rows)
    if Path(args.inv).read_bytes() != before:
        raise RuntimeError("checkpoint changed during eval")
    psnrs = np.array([r.psnr for r in rows])
    print(f"{args.report} mean psnr {psnrs.mean():.3f}")


def cmd_grad_check(args) -> None:
    from .gradcheck import composite_gradient_check

    gen = ToyGenerator.load(args.gen)
    errs = composite_gradient_check(gen, n_probes=args.probes, seed=args.seed or 0, resolution=args.resolution)
    worst = max(errs.values())
    for name, err in errs.items():
        print(f"{name} max_rel_err {err:.3e}")
    if worst > args.tol:
        raise RuntimeError(f"gradient check failed: max relative error {worst:.3e} > {args.tol:g}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="64-bit seed (default: config value, else 0)")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = deterministic)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="compinv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", parents=[common], help="fit the toy generator")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--point-iters", type=int)
    s.add_argument("--render-iters", type=int)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("gen-dataset", parents=[common], help="render a synthetic video dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_gen_dataset)

    s = sub.add_parser("invert", parents=[common], help="run stages A, B, C")
    s.add_argument("--dataset", required=True)
    s.add_argument("--gen")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--stage", help="stages to run, e.g. A, BC (default: all remaining)")
    s.add_argument("--resume", help="continue from an inversion checkpoint")
    s.add_argument("--clip", action="store_true", help="clip gradient norm at 10")
    s.set_defaults(fn=cmd_invert)

    def scene_args(s):
        s.add_argument("--dataset", required=True)
        s.add_argument("--inv", required=True)
        s.add_argument("--gen", help="generator checkpoint (default: path stored in --inv)")

    s = sub.add_parser("render", parents=[common], help="render the reconstruction of one frame")
    scene_args(s)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--hr", action="store_true", help="apply the upsampler")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("edit", parents=[common], help="render a latent edit")
    scene_args(s)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--direction", required=True)
    s.add_argument("--strength", type=float, default=1.0)
    s.add_argument("--registry", help="direction registry file (default: generator's toy axes)")
    s.add_argument("--write-registry", help="also write the registry in use to this file")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_edit)

    s = sub.add_parser("remove-ood", parents=[common], help="render without the OOD field")
    scene_args(s)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_remove_ood)

    s = sub.add_parser("novel-view", parents=[common], help="render frame t from an orbit camera")
    scene_args(s)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--yaw", type=float, default=0.0)
    s.add_argument("--pitch", type=float, default=0.0)
    s.add_argument("--radius", type=float)
    s.add_argument("--low-res", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_novel_view)

    s = sub.add_parser("eval", parents=[common], help="per-frame PSNR/SSIM/L2 report")
    scene_args(s)
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the composite loss")
    s.add_argument("--gen", required=True)
    s.add_argument("--probes", type=int, default=100)
    s.add_argument("--resolution", type=int, default=6)
    s.add_argument("--tol", type=float, default=1e-5)
    s.set_defaults(fn=cmd_grad_check)
    return p


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_threads(args.threads)
    try:
        args.fn(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except (Exception, KeyboardInterrupt) as exc:  # noqa: BLE001
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
