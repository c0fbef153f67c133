"""Command line entry point: ``modmed {train,eval,sample,profile,synth}``."""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import harness
from .config import ConfigError, load_config
from .data import load_array, synth_shapes_dataset
from .profiler import parse_dims, profile


def _csv_list(text, cast=str):
    return [cast(v) for v in str(text).split(",") if v.strip()]


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.output is not None:
        cfg.output_dir = args.output
    result = harness.train(cfg)
    last = result.history[-1]
    print(f"best_epoch,{result.best_epoch}")
    for key, value in last.items():
        print(f"{key},{value}")
    print(f"checkpoint,{result.best_checkpoint}")
    return 0


def cmd_eval(args):
    report = harness.evaluate(args.checkpoint, args.split, seed=args.seed)
    if args.out:
        report.to_csv(args.out)
    print("metric,value")
    for key, value in report.metrics.items():
        print(f"{key},{value!r}")
    return 0


def cmd_sample(args):
    cond = None
    if args.condition:
        arr = load_array(args.condition)
        cond = torch.from_numpy(arr).float()[None, None]
    images = harness.sample(args.checkpoint, args.n, args.ensemble, cond, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out, images.numpy())
    print(f"wrote {tuple(images.shape)} samples to {out}")
    return 0


def cmd_profile(args):
    report = profile(
        _csv_list(args.blocks),
        _csv_list(args.layers, int),
        [parse_dims(p) for p in _csv_list(args.patch)],
        iters=args.iters,
        batch=args.batch,
        channels=args.channels,
        repeats=args.repeats,
    )
    if args.out:
        report.to_csv(args.out)
    print(report.to_table())
    return 0


def cmd_synth(args):
    if args.task != "shapes":
        raise ValueError(f"unknown synthetic task {args.task!r}")
    manifest = synth_shapes_dataset(args.n, parse_dims(args.dims), args.seed, out=args.out, num_classes=args.classes)
    print(f"wrote {len(manifest)} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modmed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", help="override output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="per-sample CSV report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw samples from a diffusion checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--ensemble", type=int)
    p.add_argument("--condition")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="samples.npy")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("profile", help="parameter count, memory and timing table")
    p.add_argument("--blocks", required=True, help="comma list, e.g. conv,swin,mamba")
    p.add_argument("--layers", required=True, help="comma list, e.g. 8,16,32")
    p.add_argument("--patch", required=True, help="comma list of dims, e.g. 16x16x16,32x32x32")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--task", default="shapes")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", default="64x64")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
