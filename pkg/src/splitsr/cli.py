"""Command line entry point: ``splitsr <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cost import model_cost
from .degrade import LEVELS, apply_recipe, encode_vector, sample_recipe, synth_dataset, synthetic_hr_images
from .harness import TrainConfig, evaluate, train
from .losses import LossWeights
from .metrics import load_png, save_png
from .model import PRESETS, load_checkpoint, preset


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"sizes must be positive, got {text!r}")
    return h, w


def _floats(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or comma list, got {text!r}") from None
    return vals[0] if len(vals) == 1 else vals


def cmd_degrade(args):
    hr = load_png(args.input)
    s = args.scale
    hr = hr[:, :hr.shape[1] - hr.shape[1] % (2 * s), :hr.shape[2] - hr.shape[2] % (2 * s)]
    rng = np.random.default_rng(args.seed)
    recipe = sample_recipe(args.level, s, rng)
    lr = apply_recipe(hr, recipe, rng)
    save_png(lr, args.output)
    out = {"lr": str(args.output), "level": recipe.level, "scale": s,
           "u": [float(x) for x in encode_vector(recipe)], "recipe": asdict(recipe)}
    print(json.dumps(out, indent=2))
    return 0


def cmd_synth(args):
    hr_dir = args.hr_dir
    if hr_dir is None:
        hr_dir = Path(args.out) / "hr_src"
        hr_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(synthetic_hr_images(args.procedural, args.size, args.seed)):
            save_png(img, hr_dir / f"img_{i:04d}.png")
    manifest = synth_dataset(hr_dir, args.levels, args.count, args.scale, args.seed,
                             Path(args.out) / "pairs" if args.hr_dir is None else args.out, args.workers)
    print(manifest)
    return 0


def cmd_train(args):
    if args.config:
        config = TrainConfig.from_json(args.config)
    elif args.desk:
        config = TrainConfig.desk(args.stage)
    else:
        config = TrainConfig(stage=args.stage)
    overrides = {k: getattr(args, k) for k in ("iterations", "seed", "lr", "batch_size") if getattr(args, k) is not None}
    if args.sparsity is not None:
        overrides["weights"] = LossWeights(**{**asdict(config.weights), "sparsity": args.sparsity})
    if overrides:
        config = TrainConfig.from_dict({**config.to_dict(), **overrides})
    _, runlog = train(config, args.manifest, args.out, init=args.init, resume=args.resume)
    last = runlog.records[-1] if runlog.records else {}
    print(json.dumps({k: v for k, v in last.items() if k != "wall_time"}, sort_keys=True))
    return 0


def cmd_eval(args):
    res = evaluate(args.ckpt, args.manifest, fixed_a=args.fixed_a, out_csv=args.csv, out_json=args.json)
    for row in res["levels"]:
        print(f"{row['level']:<4} psnr {row['psnr']:.3f}  ssim {row['ssim']:.4f}  "
              f"bicubic {row['bicubic_psnr']:.3f}  a {row['mean_a']:.3f}  GFLOPs {row['gflops']:.4f}")
    return 0


def cmd_flops(args):
    rep = model_cost(preset(args.preset), args.input, args.a)
    print(rep.to_json())
    if not args.json_only:
        print(rep.table())
    return 0


def cmd_sr(args):
    model = load_checkpoint(args.ckpt)
    lr = load_png(args.input)
    fixed = args.fixed_a
    if fixed is None and not model.config.predictors:
        fixed = 0.5
    sr, _, a = model.infer(lr, fixed_a=fixed)
    save_png(sr[0], args.output)
    print(json.dumps({"output": str(args.output), "shape": list(sr.shape[1:]),
                      "a": [float(x) for x in np.asarray(a)[0]]}))
    return 0


def cmd_predict(args):
    model = load_checkpoint(args.ckpt)
    if not model.config.predictors:
        raise ValueError(f"{args.ckpt}: model has no degradation predictor")
    lr = load_png(args.input)
    _, u, a = model.infer(lr)
    a = np.asarray(a)[0]
    print(json.dumps({"u": [float(x) for x in u[0]], "a": [float(x) for x in a],
                      "gflops": model_cost(model.config, lr.shape[1:], a).gflops}, indent=2))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="splitsr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    q = sub.add_parser("degrade", help="degrade one HR PNG with a sampled recipe")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--level", choices=LEVELS, default="S1")
    q.add_argument("--scale", type=int, choices=(2, 3, 4), default=4)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_degrade)

    q = sub.add_parser("synth", help="build an LR/HR pair set with manifest")
    q.add_argument("--hr-dir", help="directory of HR PNGs (default: procedural images)")
    q.add_argument("--procedural", type=int, default=16, help="number of procedural HR images")
    q.add_argument("--size", type=int, default=96)
    q.add_argument("--levels", default="S0,S1,S2,S3")
    q.add_argument("--count", type=int, default=16)
    q.add_argument("--scale", type=int, choices=(2, 3, 4), default=2)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_synth)

    q = sub.add_parser("train", help="run a training stage")
    q.add_argument("--manifest", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--config", help="TrainConfig JSON")
    q.add_argument("--stage", choices=("pretrain", "joint"), default="pretrain")
    q.add_argument("--desk", action="store_true", help="desk-scale defaults")
    q.add_argument("--init", help="starting checkpoint")
    q.add_argument("--resume", help="checkpoint to resume, optimizer included")
    q.add_argument("--iterations", type=int)
    q.add_argument("--batch-size", type=int)
    q.add_argument("--lr", type=float)
    q.add_argument("--seed", type=int)
    q.add_argument("--sparsity", type=float, help="weight of the split sparsity loss")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("eval", help="PSNR/SSIM, mean a and GFLOPs per level")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--fixed-a", type=float)
    q.add_argument("--csv", "--out", dest="csv", help="per-image and per-level CSV")
    q.add_argument("--json")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("flops", help="parameter and FLOP counts of a preset")
    q.add_argument("--preset", choices=sorted(PRESETS), default="dcs")
    q.add_argument("--input", type=_size, default=(256, 256), help="LR size HxW")
    q.add_argument("--a", type=_floats, default=0.5, help="split ratio, scalar or per-block list")
    q.add_argument("--json-only", action="store_true")
    q.set_defaults(func=cmd_flops)

    q = sub.add_parser("sr", help="super-resolve one PNG")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--fixed-a", type=float)
    q.set_defaults(func=cmd_sr)

    q = sub.add_parser("predict-degradation", help="predicted degradation vector and split ratios")
    q.add_argument("input")
    q.add_argument("--ckpt", required=True)
    q.set_defaults(func=cmd_predict)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"splitsr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
