"""Command-line interface.

Subcommands: gen-data, train, eval, predict, gradcheck.
"""
from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .data import DEFAULT_SIGMA, generate_dataset


def _csv(text):
    return [t for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantcount",
                                     description="Zero-shot counting on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--splits", default="train,val,test")
    p.add_argument("--category", default="circles,squares")
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-count", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-scenes", default="",
                   help="comma list matching --splits (default 512,64,128)")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--density-size", type=int, default=32)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("predict", help="predict a density map for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", required=True)
    p.add_argument("--coords", type=int, default=32)
    p.add_argument("--no-kink-guard", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "gen-data":
        splits = _csv(args.splits)
        counts = [int(c) for c in _csv(args.num_scenes)]
        if counts and len(counts) != len(splits):
            raise SystemExit("--num-scenes must match --splits")
        per_split = dict(zip(splits, counts)) if counts else None
        paths = generate_dataset(
            args.out, splits, _csv(args.category), args.min_count, args.max_count,
            seed=args.seed, scenes_per_split=per_split,
            image_size=args.image_size, density_size=args.density_size,
            sigma=args.sigma)
        for split, path in paths.items():
            print(f"{split}: {path}")
        return 0

    if args.command == "train":
        from .train import train
        cfg = load_config(args.config)
        result = train(cfg, args.out)
        last = result["history"][-1] if result["history"] else {}
        print(json.dumps({
            "steps": result["steps"],
            "best_ckpt": result["best_ckpt"],
            "last_ckpt": result["last_ckpt"],
            "final": {k: last.get(k) for k in ("epoch", "loss_total", "val_mae", "val_rmse")},
        }, indent=2))
        return 0

    if args.command == "eval":
        from .train import evaluate, load_checkpoint
        model, _ = load_checkpoint(args.ckpt)
        result = evaluate(model, args.manifest)
        print(json.dumps({"mae": result["mae"], "rmse": result["rmse"]}, indent=2))
        return 0

    if args.command == "predict":
        from .train import predict
        result = predict(args.ckpt, args.image, args.text, args.out)
        print(f"count: {result['count']:.2f}")
        print(f"density: {result['qdm_path']}")
        print(f"heatmap: {result['heatmap_path']}")
        return 0

    if args.command == "gradcheck":
        from .gradcheck import format_report, run_gradcheck
        cfg = load_config(args.config)
        reports = run_gradcheck(cfg, num_coords=args.coords,
                                kink_guard=not args.no_kink_guard)
        print(format_report(reports))
        return 0 if all(r.passed for r in reports) else 1

    raise SystemExit(f"unknown command: {args.command}")


if __name__ == "__main__":
    sys.exit(main())
