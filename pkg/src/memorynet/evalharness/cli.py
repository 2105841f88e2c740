"""Command-line entry point: ``memorynet <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..data import load_pnm, make_dataset, save_pairs
from ..errors import MemoryNetError
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, format_config, load_config
from .features import dump_features
from .gradsuite import TOLERANCE, run_suite
from .trainer import ablate, evaluate, train, write_ablation_csv

log = logging.getLogger("memorynet")


def _config(path) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def cmd_synth(args) -> int:
    pairs = make_dataset(args.kind, args.count, args.size, args.seed)
    save_pairs(pairs, args.out)
    print(f"wrote {len(pairs)} {args.kind} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    result = train(cfg, args.data, args.out, val=args.val)
    Path(args.out, "config.txt").write_text(format_config(cfg))
    last = result.log[-1] if result.log else {}
    print(f"trained {result.checkpoint.iteration} iterations; final val psnr {last.get('val_psnr', float('nan')):.3f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    rep = evaluate(ckpt, args.data, mask_dir=args.mask_dir, out_csv=args.out)
    for key, value in rep.as_dict().items():
        if value is not None:
            print(f"{key:>9s} {value:.4f}")
    print(f"{'count':>9s} {rep.count}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    rows = ablate(cfg, args.data, args.out)
    write_ablation_csv(rows, Path(args.out) / "ablation.csv")
    print(f"{'config':<18s} {'psnr':>8s} {'ssim':>7s} {'rmse':>7s}")
    for row in rows:
        print(f"{row['config']:<18s} {row['psnr']:8.3f} {row['ssim']:7.4f} {row['rmse_lab']:7.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    for res in run_suite(seed=args.seed, include_network=not args.ops_only):
        status = "ok" if res.ok else "FAIL"
        failed += not res.ok
        print(f"{status:4s} {res.error:.2e} {res.seconds:6.2f}s {res.name}")
    print(f"{failed} check(s) above tolerance {TOLERANCE:g}")
    return 1 if failed else 0


def cmd_dump_features(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    pre, post = dump_features(ckpt, load_pnm(args.image), args.out)
    print(f"wrote {pre} and {post}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memorynet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--kind", choices=("shadow", "rain", "blur"), default="shadow")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="two-phase training")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="pair directory (a train/ subdirectory is used if present)")
    p.add_argument("--val", help="validation pair directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mask-dir")
    p.add_argument("--out", help="per-image metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare the four memory/contrast configurations")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="directory with train/ and test/ subdirectories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true", help="skip the network checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-features", help="write first-layer feature mosaics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (MemoryNetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
