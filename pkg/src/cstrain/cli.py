"""Command line entry point: ``cstrain {train-cs,train-sgd,train-hybrid,evaluate}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment
from .data import IdxError, load_split
from .network import CheckpointError, DivergenceError, NonFiniteError
from .search import SearchAborted

TRAIN_COMMANDS = {"train-cs": "cs", "train-sgd": "sgd", "train-hybrid": "hybrid"}


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-images")
    p.add_argument("--train-labels")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value file; flags override it")
    _add_data_flags(p)
    p.add_argument("--subset", help="sample N training images (seeded)")
    p.add_argument("--test-subset", help="sample N test images (seeded)")
    p.add_argument("--layers", help="layer sizes, e.g. 784,300,100,10")
    p.add_argument("--bsf", help="box-constraint shrinkage factor in (0, 0.5)")
    p.add_argument("--bounds", help="initial box LOWER,UPPER for every weight")
    p.add_argument("--init", help="center | uniform:lo,hi | normal:mu,sigma")
    p.add_argument("--feed", help="whole | folds:k | sliding:w,s")
    p.add_argument("--schedule", help="bundle schedule COUNTxSIZE,..., e.g. 5x25,20x100")
    p.add_argument("--cs-iterations", help="CS iterations before SGD takes over (hybrid)")
    p.add_argument("--max-iterations", help="stop CS after this many iterations")
    p.add_argument("--target-accuracy", help="stop once training accuracy reaches this")
    p.add_argument("--lr")
    p.add_argument("--batch-size")
    p.add_argument("--epochs")
    p.add_argument("--time-budget", help="wall-clock seconds for the run; SGD stops at "
                   "the first epoch boundary past it")
    p.add_argument("--seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cstrain", description="Train dense networks by bundled coordinate search or SGD.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, mode in TRAIN_COMMANDS.items():
        _add_train_flags(sub.add_parser(name, help=f"train with {mode}"))
    ev = sub.add_parser("evaluate", help="score a checkpoint on a labelled IDX set")
    ev.add_argument("--checkpoint", required=True, type=Path)
    ev.add_argument("--images", required=True)
    ev.add_argument("--labels", required=True)
    ev.add_argument("--out", type=Path, help="directory for confusion matrix CSVs")
    return parser


def config_from_args(args: argparse.Namespace) -> experiment.ExperimentConfig:
    values = experiment.read_config_file(args.config) if args.config else {}
    values.pop("mode", None)
    for key in experiment.PARSERS:
        given = getattr(args, key, None)
        if given is not None:
            values[key] = given
    return experiment.build_config(values, mode=TRAIN_COMMANDS[args.command])


def _evaluate(args) -> int:
    dataset = load_split(args.images, args.labels)
    report = experiment.evaluate(args.checkpoint, dataset)
    for line in report.lines():
        print(line)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        report.confusion.to_csv(args.out / "confusion_counts.csv",
                                args.out / "confusion_normalized.csv")
    return 0


def _attach_bounds(argv: list[str]) -> list[str]:
    # argparse reads "-1,1" as an option string, so bind it to --bounds explicitly
    out = []
    tokens = iter(argv)
    for tok in tokens:
        if tok == "--bounds":
            tok = f"--bounds={next(tokens, '')}"
        out.append(tok)
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_attach_bounds(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "evaluate":
            return _evaluate(args)
        result = experiment.run(config_from_args(args))
    except (ValueError, OSError, IdxError, CheckpointError, SearchAborted,
            DivergenceError, NonFiniteError) as exc:
        print(f"cstrain: error: {exc}", file=sys.stderr)
        return 1
    for key in ("train_accuracy", "test_accuracy", "macro_precision", "macro_recall"):
        if key in result.summary:
            print(f"{key} {result.summary[key]!r}")
    print(f"artifacts in {result.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
