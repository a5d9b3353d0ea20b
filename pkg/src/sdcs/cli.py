"""Command line entry point.

    sdcs [global flags] <subcommand> [subcommand flags]

Subcommands: synth, train-sdcs, train-center, train-svm, detect, classify,
evaluate, score, overlay, calibrate. Global flags: --config, --seed,
--threshold, --tile-size, --out, --data, --force. The SDCS_LOG environment
variable sets the log level.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .nn import NonFiniteError, ShapeMismatchError
from .pipeline import (
    PipelineError,
    calibrate_command,
    classify_command,
    detect_command,
    evaluate_command,
    overlay_command,
    score_command,
    synth_dataset,
    train_center_command,
    train_sdcs_command,
    train_svm_command,
)
from .synthetic import PackingError

COMMANDS = (
    "synth",
    "train-sdcs",
    "train-center",
    "train-svm",
    "detect",
    "classify",
    "evaluate",
    "score",
    "overlay",
    "calibrate",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdcs",
        description="Nucleus detection and 4-class Ki67 classification pipeline",
    )
    parser.add_argument("--version", action="version", version=f"sdcs {__version__}")
    parser.add_argument("--config", type=Path, help="pipeline config text file")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--threshold", type=float, help="detection threshold override")
    parser.add_argument("--tile-size", type=int, help="synthetic tile size override")
    parser.add_argument("--out", type=Path, default=Path("sdcs_out"), help="output directory")
    parser.add_argument(
        "--data", type=Path, help="dataset directory (defaults to --out)"
    )
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name in ("detect", "classify"):
            p.add_argument("--method", choices=("sdcs", "classical"), default="sdcs")
        if name in ("detect", "classify", "evaluate", "score", "overlay"):
            p.add_argument("--role", choices=("train", "val", "test"), default="test")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.threshold is not None:
        cfg = dataclasses.replace(
            cfg, detector=dataclasses.replace(cfg.detector, threshold=args.threshold)
        )
    if args.tile_size is not None:
        cfg = dataclasses.replace(
            cfg, scene=dataclasses.replace(cfg.scene, tile_size=args.tile_size)
        )
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("SDCS_LOG", "WARNING").upper(),
        format="%(name)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = args.out
        data = args.data or out
        if args.command == "synth":
            synth_dataset(cfg, out, force=args.force)
        elif args.command == "train-sdcs":
            train_sdcs_command(cfg, data, out, force=args.force)
        elif args.command == "train-center":
            train_center_command(cfg, data, out, force=args.force)
        elif args.command == "train-svm":
            train_svm_command(cfg, data, out, force=args.force)
        elif args.command == "detect":
            detect_command(cfg, data, out, role=args.role, method=args.method, force=args.force)
        elif args.command == "classify":
            classify_command(cfg, data, out, role=args.role, method=args.method, force=args.force)
        elif args.command == "evaluate":
            evaluate_command(cfg, data, out, role=args.role, force=args.force)
        elif args.command == "score":
            score_command(cfg, data, out, role=args.role, force=args.force)
        elif args.command == "overlay":
            overlay_command(cfg, data, out, role=args.role, force=args.force)
        elif args.command == "calibrate":
            calibrate_command(cfg, data, out, force=args.force)
    except (
        PipelineError,
        ConfigError,
        PackingError,
        ShapeMismatchError,
        NonFiniteError,
        FileNotFoundError,
    ) as err:
        print(f"sdcs {args.command}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
