"""Command-line entry point: ``tshap <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 1 missing inputs or bad arguments, 2 configuration error, 3 training failure, 4 numeric error.
"""

from __future__ import annotations

import argparse
import sys

from . import experiment
from .errors import ConfigError, InvalidArgumentError, NumericOverflowError, TrainingFailureError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_TRAINING, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tshap", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field (dotted keys, e.g. model.epochs=10); repeatable")
    common.add_argument("--output-dir", help="shorthand for --set output_dir=...")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="synthesize and preprocess the dataset")
    sub.add_parser("train", parents=[common], help="train one LSTM (and CNN) per fold")
    p = sub.add_parser("explain", parents=[common], help="write attribution CSVs per method")
    p.add_argument("--method", action="append", choices=experiment.METHODS,
                   help="restrict to these base methods (repeatable)")
    p.add_argument("--folds", type=_int_list, help="comma-separated fold indices")
    p = sub.add_parser("evaluate", parents=[common], help="AUP/TV report and figure data")
    p.add_argument("--abs-rank", action="store_true", help="rank cells by |attribution|")
    p = sub.add_parser("sweep-w", parents=[common], help="AUP and accuracy across window sizes")
    p.add_argument("--w", type=_int_list, help="comma-separated window half-widths")
    sub.add_parser("ablate", parents=[common], help="uniform vs EWMA smoothing table")
    sub.add_parser("report", parents=[common], help="render SVG figures from evaluate outputs")
    return parser


def run(args: argparse.Namespace) -> int:
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if getattr(args, "abs_rank", False):
        overrides.append("metrics.abs_rank=true")
    cfg = experiment.load_config(args.config, overrides)
    if args.command == "generate":
        experiment.cmd_generate(cfg)
    elif args.command == "train":
        experiment.cmd_train(cfg)
    elif args.command == "explain":
        experiment.cmd_explain(cfg, args.method, args.folds)
    elif args.command == "evaluate":
        experiment.cmd_evaluate(cfg)
    elif args.command == "sweep-w":
        experiment.cmd_sweep_w(cfg, args.w)
    elif args.command == "ablate":
        experiment.cmd_ablate(cfg)
    elif args.command == "report":
        experiment.cmd_report(cfg)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFailureError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except NumericOverflowError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
