"""Command-line entry point.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime or numeric
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, config_with, default_config, load_config
from .harness import (
    TRAIN_VARIANTS,
    cmd_adapt,
    cmd_ablate,
    cmd_gen_data,
    cmd_report,
    cmd_sweep_beta,
    cmd_train,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamadapt",
        description="Meta-learned test-time adaptation on distribution-shifting "
                    "streams: training, evaluation, sweeps, and reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, checkpoint: bool = False) -> None:
        p.add_argument("--config", metavar="PATH",
                       help="run configuration file (defaults used when omitted)")
        p.add_argument("--out", metavar="DIR",
                       help="output directory (overrides run.out)")
        p.add_argument("--seed", type=int, metavar="N",
                       help="restrict to a single run seed (overrides run.seeds)")
        if checkpoint:
            p.add_argument("--checkpoint", metavar="PATH",
                           help="trained checkpoint manifest to adapt from")

    p = sub.add_parser("gen-data", help="write the synthetic dataset to a records file")
    common(p)
    p = sub.add_parser("train", help="train a model variant for every run seed")
    common(p)
    p.add_argument("--variant", choices=TRAIN_VARIANTS, default="meta")
    p = sub.add_parser("adapt", help="evaluate a checkpoint on seeded test streams")
    common(p, checkpoint=True)
    p = sub.add_parser("sweep-beta", help="evaluate the configured test-time rates")
    common(p, checkpoint=True)
    p = sub.add_parser("ablate", help="train and evaluate all ablation variants")
    common(p)
    p = sub.add_parser("report", help="aggregate stored results into tables")
    common(p)
    return parser


def _load(args) -> tuple:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = config_with(cfg, run_seeds=(args.seed,))
    out = Path(args.out if args.out else cfg.run_out)
    return cfg, out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # argparse exits 2 on usage errors, 0 on --help
        return 0 if exc.code == 0 else 1

    try:
        cfg, out = _load(args)
        if args.command == "gen-data":
            path = cmd_gen_data(cfg, out)
            print(f"wrote {path}")
        elif args.command == "train":
            for ckpt in cmd_train(cfg, out, args.variant):
                print(f"wrote {ckpt}")
        elif args.command == "adapt":
            if not args.checkpoint:
                raise ConfigError("adapt requires --checkpoint")
            summary = cmd_adapt(cfg, out, Path(args.checkpoint))
            print(summary.read_text(), end="")
        elif args.command == "sweep-beta":
            if not args.checkpoint:
                raise ConfigError("sweep-beta requires --checkpoint")
            table = cmd_sweep_beta(cfg, out, Path(args.checkpoint))
            print(table.read_text(), end="")
        elif args.command == "ablate":
            table = cmd_ablate(cfg, out)
            print(table.read_text(), end="")
        elif args.command == "report":
            txt_path, _ = cmd_report(out)
            print(txt_path.read_text(), end="")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 — uniform runtime-failure exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
