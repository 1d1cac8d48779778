"""Command-line entry points: generate, train, eval, predict, gradcheck."""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig
from .data import CATEGORIES, DatasetSpec, ManifestError, generate_dataset, load_split
from .metrics import build_report, render_table
from .model import AnchorIndex, load_model, predict_image
from .ppm import read_ppm, write_ppm
from .train import TrainingAborted, train
from .verify import (END_TO_END_TOLERANCE, OPERATOR_TOLERANCE,
                     micro_model_grad_check, operator_grad_checks)


def _load_run_config(args) -> RunConfig:
    run = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k, None) for k in (
        "lr", "momentum", "weight_decay", "batch_size", "seed", "top_k",
        "epochs_phase0", "epochs_phase1", "epochs_phase2", "alpha", "beta", "gamma",
        "expansion_factor", "fusion_mode", "label_threshold", "image_size")}
    return run.with_overrides(**overrides)


def cmd_generate(args) -> int:
    if args.num_train < 1 or args.num_val < 1:
        raise ValueError("--num-train and --num-val must be positive")
    spec = DatasetSpec(num_train=args.num_train, num_val=args.num_val,
                       image_size=args.size, seed=args.seed,
                       min_objects=args.min_objects, max_objects=args.max_objects,
                       noise=args.noise)
    summary = generate_dataset(spec, args.out)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_train(args) -> int:
    run = _load_run_config(args)
    result = train(run, args.data, args.out, args.log)
    print(json.dumps(result))
    return 0


def cmd_eval(args) -> int:
    params, cfg = load_model(args.checkpoint)
    samples = load_split(os.path.join(args.data, args.split))
    if samples and samples[0].image.shape[1] != cfg.image_size:
        raise ValueError(f"checkpoint expects {cfg.image_size}px images, "
                         f"dataset has {samples[0].image.shape[1]}px")
    from .train import evaluate_records

    index = AnchorIndex(cfg)
    records = evaluate_records(samples, params, cfg, index, branch=args.branch)
    report = build_report(records, binarization=args.binarization, class_names=list(CATEGORIES))
    with open(args.report, "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    print(render_table(report, label=f"scamnet/{args.branch}"))
    return 0


def cmd_predict(args) -> int:
    from .annotate import annotate

    params, cfg = load_model(args.checkpoint)
    pixels = read_ppm(args.image)
    if pixels.shape[:2] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"image is {pixels.shape[1]}x{pixels.shape[0]}, "
                         f"checkpoint expects {cfg.image_size}x{cfg.image_size}")
    image = pixels.astype(np.float64).transpose(2, 0, 1) / 255.0
    pred = predict_image(image, params, cfg)
    print("confidences:", {CATEGORIES[c]: round(float(v), 4) for c, v in enumerate(pred.fused)})
    print("labels:", [CATEGORIES[c] for c in pred.labels])
    if args.out:
        tagged = [(b, CATEGORIES[c]) for b, c, _ in pred.boxes]
        write_ppm(args.out, annotate(pixels, tagged, pred.context_boxes))
        print(f"annotated image written to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    for name, err in operator_grad_checks(args.seed).items():
        passed = err <= OPERATOR_TOLERANCE
        ok &= passed
        print(f"{name:<18} max rel err {err:.3e}  {'ok' if passed else 'FAIL'}")
    e2e = micro_model_grad_check(args.seed)
    passed = e2e <= END_TO_END_TOLERANCE
    ok &= passed
    print(f"{'micro-model e2e':<18} max rel err {e2e:.3e}  {'ok' if passed else 'FAIL'}")
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scamnet",
                                description="two-branch spatial-context-aware multi-label classifier")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num-train", type=int, default=2000)
    g.add_argument("--num-val", type=int, default=500)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=4)
    g.add_argument("--noise", type=float, default=0.08)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="staged training on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", required=True, help="JSONL training log path")
    t.add_argument("--config", help="JSON RunConfig file; flags override it")
    for flag, typ in (("--lr", float), ("--momentum", float), ("--weight-decay", float),
                      ("--batch-size", int), ("--seed", int), ("--top-k", int),
                      ("--epochs-phase0", int), ("--epochs-phase1", int), ("--epochs-phase2", int),
                      ("--alpha", float), ("--beta", float), ("--gamma", float),
                      ("--expansion-factor", float), ("--label-threshold", float),
                      ("--image-size", int)):
        t.add_argument(flag, type=typ)
    t.add_argument("--fusion-mode", choices=("max", "mean"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--branch", default="fused", choices=("object", "context", "fused"))
    e.add_argument("--binarization", default="threshold:0.5")
    e.add_argument("--report", required=True, help="JSON report output path")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="label one PPM image and annotate it")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", help="annotated PPM output path")
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--seed", type=int, default=1)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, ManifestError, FileNotFoundError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingAborted as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
