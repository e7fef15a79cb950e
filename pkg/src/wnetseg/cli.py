"""``wnetseg`` command line: synth, train, segment, eval.

Exit status: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed input), 3 numeric failure (divergence, degenerate
classes).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, PipelineConfig, describe
from .contours.ucm import StructuralError
from .crf import CrfSizeError
from .metrics import ods_ois, write_report
from .model.checkpoint import CheckpointError
from .model.network import ConfigError as NetworkConfigError
from .model.train import TrainingDiverged
from .ncut import DegenerateClassError
from .pnm import CoverageError, FormatError
from .synth import write_corpus
from .tensor import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wnetseg", description="Unsupervised W-Net segmentation pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus with exact ground truth")
    _common(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a network on a directory of PNM images")
    _common(p)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--run", type=Path, required=True, help="run directory for checkpoint and traces")
    p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    p.add_argument("--stop-at", type=int, help="stop before this iteration (resumable)")

    p = sub.add_parser("segment", help="segment images with a trained checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--stage", choices=pipeline.STAGES, default="ucm",
                   help="last stage to run (default: ucm)")
    p.add_argument("inputs", nargs="+", type=Path, help="images or directories of images")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _common(p)
    p.add_argument("--pred", type=Path, required=True, help="segment output directory")
    p.add_argument("--gt", type=Path, required=True, help="ground-truth directory")
    p.add_argument("--out", type=Path, required=True, help="report directory")

    p = sub.add_parser("config", help="print every configuration key with its default")
    return parser


def _run(args) -> int:
    if args.command == "config":
        sys.stdout.write(describe())
        return EXIT_OK
    cfg = PipelineConfig.load(args.config, args.set)
    if args.command == "synth":
        ids = write_corpus(cfg.synth(), args.out)
        (args.out / "config.txt").write_text(cfg.dumps())
        print(f"wrote {len(ids)} images to {args.out}")
    elif args.command == "train":
        _, state = pipeline.run_training(cfg, args.images, args.run, args.resume, args.stop_at)
        print(f"trained to iteration {state.iteration}; checkpoint in {args.run}")
    elif args.command == "segment":
        ids = pipeline.run_segment(cfg, args.checkpoint, args.inputs, args.out, args.stage)
        print(f"segmented {len(ids)} images into {args.out}")
    elif args.command == "eval":
        records = pipeline.run_eval(cfg, args.pred, args.gt)
        args.out.mkdir(parents=True, exist_ok=True)
        write_report(records, args.out / "report.csv")
        summary = ods_ois(records)
        (args.out / "summary.txt").write_text(summary.table())
        sys.stdout.write(summary.table())
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _run(args)
    except (UsageError, ConfigError, NetworkConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, DegenerateClassError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.DataError, FormatError, CoverageError, CheckpointError, ShapeError,
            CrfSizeError, StructuralError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining validation failures come from parameter values
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
