"""Command line entry point.

    mgalign <command> --run-dir RUN [--config FILE] [--set section.key=value ...]

Commands: synth, split, pretrain, latent-eval, finetune, task-eval,
interpret, sweep, all. Exit status is 0 on success, 2 for configuration
errors, 3 for data errors (including missing upstream artifacts) and 4 for
numeric failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .contrastive import SkippedBatch
from .decoder import DegenerateLabels, DivergenceError, SequenceTooLong
from .latent_eval import UndefinedMetric
from .metrics import UndefinedMetric as UndefinedTaskMetric
from .nn import NonFiniteError
from .pipeline import PIPELINE, STAGES, MissingArtifact, prepare_run_dir
from .synth import GenerationError
from .timeline import EmptyTimeline

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATA_ERRORS = (MissingArtifact, GenerationError, DegenerateLabels, EmptyTimeline, SequenceTooLong,
               UndefinedMetric, UndefinedTaskMetric, SkippedBatch)
NUMERIC_ERRORS = (DivergenceError, NonFiniteError, FloatingPointError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgalign", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=list(STAGES) + ["all"])
    parser.add_argument("--run-dir", required=True, type=Path, help="run directory (created if absent)")
    parser.add_argument("--config", type=Path, help="YAML experiment config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf, e.g. --set pretrain.epochs=5")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config, args.overrides)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = prepare_run_dir(args.run_dir, cfg)
        handler = logging.FileHandler(run / "logs" / f"{args.command}.log", mode="w")
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)
        for name in (PIPELINE if args.command == "all" else (args.command,)):
            STAGES[name](cfg, run)
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
