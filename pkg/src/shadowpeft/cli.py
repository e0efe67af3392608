"""Command-line surface: train, infer, eval, sample-points, ablate, census."""

import argparse
import os
import sys

import numpy as np
from PIL import Image

from . import reporting
from .config import parse_config, RunConfig, validate_config
from .data import load_dataset, make_profile
from .errors import RequestError, ShadowPeftError
from .freeze import (census_table, standard_freeze_policy, parameter_census,
                     resolve_policy)
from .prompt_net import export_mask_png
from .sampling import grid_sample, topk_sample
from .segmenter import build_model
from .trainer import (component_analysis_cells, evaluate, grid_size_cells,
                      infer, load_checkpoint, parse_matrix_file, run_ablation,
                      train)


def _load_config(args):
    if getattr(args, "config", None):
        return parse_config(args.config)
    return validate_config(RunConfig())


def cmd_train(args):
    cfg = _load_config(args)
    result = train(cfg, max_steps=args.max_steps)
    final = result.history[-1] if result.history else {}
    print(f"training done; best checkpoint at {result.checkpoint_path}")
    if "train_ber" in final:
        print(f"final training BER: {final['train_ber']:.4f}")
    return 0


def _iter_images(args):
    if args.image:
        yield args.image
        return
    for fn in sorted(os.listdir(args.dir)):
        if os.path.splitext(fn)[1].lower() in (".png", ".jpg", ".jpeg"):
            yield os.path.join(args.dir, fn)


def cmd_infer(args):
    model, cfg, _ = load_checkpoint(args.checkpoint)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    for path in _iter_images(args):
        image = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        binary, coarse, _ = infer(model, image)
        stem = os.path.splitext(os.path.basename(path))[0]
        Image.fromarray((binary * 255).astype(np.uint8), mode="L").save(
            os.path.join(out_dir, f"{stem}_mask.png"))
        export_mask_png(coarse, os.path.join(out_dir, f"{stem}_coarse.png"))
        print(f"{path}: wrote {stem}_mask.png, {stem}_coarse.png")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    model, cfg, _ = load_checkpoint(args.checkpoint, cfg)
    samples = load_dataset(make_profile(cfg.profile, cfg.root, cfg.split))
    reports, agg = evaluate(model, samples, cfg)
    print(reporting.format_ber_table(
        [{"name": "ALL", "ber": agg.ber, "ber_s": agg.ber_s,
          "ber_ns": agg.ber_ns}]))
    out_dir = os.path.join(cfg.run_dir, "reports")
    csv_path = reporting.write_eval_report(reports, [s.id for s in samples],
                                           agg, out_dir)
    print(f"per-image CSV: {csv_path}")
    return 0


def cmd_sample_points(args):
    cfg = _load_config(args)
    scfg = cfg.sampling_config()
    if args.mask:
        mask = np.asarray(Image.open(args.mask).convert("L"), dtype=np.float64) / 255.0
        image = (np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
                 if args.image else np.stack([mask.astype(np.float32)] * 3, axis=-1))
    elif args.checkpoint and args.image:
        model, cfg, _ = load_checkpoint(args.checkpoint)
        image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
        _, mask, _ = infer(model, image)
        mask = mask.astype(np.float64)
    else:
        raise RequestError("sample-points needs --mask, or --image with --checkpoint")
    if scfg.strategy == "grid":
        points = grid_sample(mask, scfg.grid_size, scfg.k, scfg.tau)
    else:
        points = topk_sample(mask, scfg.n_pos, scfg.n_neg)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "points.json")
    overlay_path = os.path.join(out_dir, "overlay.png")
    reporting.points_to_json(points, json_path)
    reporting.render_point_overlay(image, points, mask.shape, overlay_path,
                                   radius=args.radius)
    print(f"wrote {json_path} and {overlay_path} ({len(points)} points)")
    return 0


def cmd_ablate(args):
    cfg = _load_config(args)
    if args.matrix:
        cells = parse_matrix_file(args.matrix)
    elif args.preset == "components":
        cells = component_analysis_cells()
    elif args.preset == "grid":
        cells = grid_size_cells()
    else:
        raise RequestError("ablate needs --matrix FILE or --preset components|grid")
    samples = None
    if cfg.root:
        samples = load_dataset(make_profile(cfg.profile, cfg.root, cfg.split))
    rows = run_ablation(cells, cfg, samples=samples, max_steps=args.max_steps)
    print(reporting.format_ber_table(rows))
    reporting.write_ablation_report(rows, os.path.join(cfg.run_dir, "reports"))
    return 0


def cmd_census(args):
    if args.checkpoint:
        model, cfg, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = _load_config(args)
        model = build_model(cfg.model_config(), cfg.sampling_config())
    policy = resolve_policy(model, standard_freeze_policy(cfg.freeze_backbone))
    trainable, frozen, rows = parameter_census(model, policy)
    print(census_table(trainable, frozen, rows))
    if args.out:
        import csv as _csv
        with open(args.out, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["group", "count", "trainable"])
            for r in rows:
                writer.writerow([r.group, r.count, r.trainable])
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="shadowpeft",
        description="Adapter fine-tuning and automatic point prompts for shadow detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train per the run config")
    p.add_argument("--config", required=True)
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict shadow masks")
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--image")
    group.add_argument("--dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="BER evaluation over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample-points", help="point prompts + overlay from a coarse mask")
    p.add_argument("--image")
    p.add_argument("--mask")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--radius", type=int, default=0)
    p.set_defaults(func=cmd_sample_points)

    p = sub.add_parser("ablate", help="run a toggle matrix and report BER per cell")
    p.add_argument("--config", required=True)
    p.add_argument("--matrix")
    p.add_argument("--preset", choices=["components", "grid"])
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("census", help="trainable/frozen parameter counts")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_census)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ShadowPeftError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
