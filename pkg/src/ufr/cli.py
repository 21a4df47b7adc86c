"""Command-line entry point: ``ufr {augment,gradcheck,train,diagnose}``.

Every command reads the flat config file given by ``--config`` (optional),
then applies ``--set key=value`` overrides, then ``--seed``.  Outputs go to
``--out-dir``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import attention as att
from . import pipeline
from .config import RunConfig, apply_overrides, dump_config, load_config
from .gradcore import forward, load_checkpoint, save_checkpoint
from .localaug import AugmentationPlan, glt
from .prototypes import load_registry, save_registry
from .raster import load_image, load_objects, quantize, save_boxes, save_gray, save_image, save_mask
from .scenes import gen_scenes

GRADCHECK_TOL = 1e-3

log = logging.getLogger("ufr")


def _override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", dest="overrides", type=_override, action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--out-dir", type=Path, default=Path("out"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ufr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", parents=[common], help="global-local augmentation of one scene")
    p.add_argument("--image", type=Path, help="input PPM; a synthetic scene is generated when omitted")
    p.add_argument("--boxes", type=Path, help="box file 'category x0 y0 x1 y1' per object")
    p.add_argument("--masks", type=Path, nargs="*", default=[], help="one PGM mask per box line")
    p.add_argument("--plan-in", type=Path, help="replay a saved plan instead of sampling one")
    p.add_argument("--plan-out", type=Path, help="where to write the plan (default OUT/plan.txt)")

    sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")

    p = sub.add_parser("train", parents=[common], help="paired original/augmented training")
    p.add_argument("--attention-maps", type=int, default=1,
                   help="number of held-out scenes whose attention heat images are written")

    p = sub.add_parser("diagnose", parents=[common], help="prototype and feature diagnostics")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--compare", type=Path, help="second checkpoint for feature L1 distances")
    p.add_argument("--registry", type=Path, nargs="*", default=[],
                   help="prototype registry JSON files, one per domain")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = apply_overrides(cfg, [("seed", str(args.seed))])
    return cfg


def cmd_augment(cfg: RunConfig, args) -> int:
    out = args.out_dir
    if args.image:
        image = load_image(args.image)
        if args.boxes is None:
            raise SystemExit("--image requires --boxes and --masks")
        objects = load_objects(args.boxes, args.masks)
    else:
        scene = gen_scenes(cfg.seed, 1, cfg.size)[0]
        # snap to the 8-bit grid so original.ppm is exactly the augmented input
        image, objects = quantize(scene.image) / 255.0, scene.objects
        save_image(image, out / "original.ppm")
        save_boxes(objects.categories, objects.boxes, out / "boxes.txt")
        for k, m in enumerate(objects.masks):
            save_mask(m, out / f"mask_{k}.pgm")
    if args.plan_in:
        plan = AugmentationPlan.from_text(args.plan_in.read_text())
        augmented = glt(image, objects, plan)
    else:
        augmented, plan = pipeline.augment_scene(image, objects, cfg.seed, cfg.augment_config())
    save_image(augmented, out / "augmented.ppm")
    (args.plan_out or out / "plan.txt").write_text(plan.to_text())
    log.info("alpha %.4f r %s, %d objects", plan.alpha, plan.r, len(objects))
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    report = pipeline.run_gradcheck(cfg)
    pipeline.write_report(report, args.out_dir / "gradcheck.json")
    for term, entry in report["terms"].items():
        print(f"{term:16s} max_rel_err {entry['max_rel_err']:.3e}  ({entry['checked']} coords)")
    ok = report["gradcheck_max_rel_err"] <= GRADCHECK_TOL
    print("gradcheck", "passed" if ok else "FAILED")
    return 0 if ok else 1


def export_attention(model, scenes, cfg: RunConfig, out: Path, n: int) -> None:
    views = pipeline.domain_views(scenes[:n], cfg)
    for d, images in enumerate(views[:2]):
        for i, img in enumerate(images):
            a = forward(model, img, []).attention.value
            save_gray(att.channel_mean_map(a), out / f"attention_{i}_domain{d}.pgm")


def cmd_train(cfg: RunConfig, args) -> int:
    out = args.out_dir
    try:
        result = pipeline.train(cfg)
    except pipeline.DivergenceError as exc:
        pipeline.write_report({"command": "train", "config": cfg.to_dict(), "error": str(exc),
                               "diverged_at_step": exc.step}, out / "metrics.json")
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    pipeline.write_report(result.report, out / "metrics.json")
    save_checkpoint(result.model, out / "model.ckpt")
    save_registry(result.reg0, out / "registry_original.json")
    save_registry(result.regk, out / "registry_augmented.json")
    (out / "config.txt").write_text(dump_config(cfg))
    if args.attention_maps > 0:
        scenes = gen_scenes(cfg.seed + 1_000_003, cfg.n_eval, cfg.size)
        export_attention(result.model, scenes, cfg, out, args.attention_maps)
    final = result.report["final"]
    print(f"final dice_hard {final['dice_hard']:.4f}  mean d_c {final['mean_d_c']}  "
          f"accuracy {final['accuracy']:.3f}")
    return 0


def cmd_diagnose(cfg: RunConfig, args) -> int:
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    other = load_checkpoint(args.compare) if args.compare else None
    if other is not None and model is None:
        raise SystemExit("--compare needs --checkpoint")
    regs = [load_registry(p) for p in args.registry]
    if model is not None:
        cfg = apply_overrides(cfg, [("channels", str(model.channels))])
    report = pipeline.diagnose(cfg, model, other, regs)
    pipeline.write_report(report, args.out_dir / "diagnose.json")
    if "registry_d_c" in report:
        print("registry d_c", report["registry_d_c"])
    if "feature_l1" in report:
        print(f"feature L1 {report['feature_l1']:.6g}")
    return 0


COMMANDS = {"augment": cmd_augment, "gradcheck": cmd_gradcheck, "train": cmd_train, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    args.out_dir.mkdir(parents=True, exist_ok=True)
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
