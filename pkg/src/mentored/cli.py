"""Command-line entry point: ``mentored <subcommand> [flags]``.

Exit codes: 0 success, 1 other failure, 2 config error, 3 data error,
4 unrecoverable run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import net as netlib
from .errors import ConfigError, DataError, MentoredError, UnrecoverableRun
from .harness import experiments as ex
from .harness.config import ExperimentConfig
from .harness.filters import export_filters
from .harness.gradcheck import gradcheck
from .harness.loop import evaluate

log = logging.getLogger("mentored")

COMMANDS = ("train-mentor", "train-mentee", "pretrain-unsupervised", "finetune-classifier", "eval",
            "export-filters", "gradcheck", "redaction-grid")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mentored", description="Mentored training of small networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--deterministic", action="store_true", help="blank wall-clock column for byte-stable output")
        p.add_argument("--out", type=Path, help="output directory (or file for export-filters)")
        if name in ("train-mentee", "pretrain-unsupervised", "redaction-grid"):
            p.add_argument("--mentor", type=Path, help="mentor checkpoint (overrides mentor_checkpoint)")
        if name in ("finetune-classifier", "eval", "export-filters"):
            p.add_argument("--checkpoint", type=Path, required=True)
        if name == "export-filters":
            p.add_argument("--layer", type=int, default=0, help="layer index (negative counts from the end)")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.deterministic:
        changes["deterministic"] = True
    if args.out is not None and args.command != "export-filters":
        changes["out_dir"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg


def _report(arts):
    return {"out_dir": str(arts.out_dir), "test_acc": arts.final.get("test_acc"),
            "epochs": arts.final.get("epoch"), "recoveries": arts.recoveries, "stopped_early": arts.stopped_early}


def run(args) -> int:
    cfg = load_config(args)
    mentor = getattr(args, "mentor", None)
    result = None
    if args.command == "train-mentor":
        result = _report(ex.train_mentor(cfg))
    elif args.command == "train-mentee":
        result = _report(ex.train_mentee(cfg, mentor))
    elif args.command == "pretrain-unsupervised":
        result = _report(ex.pretrain_unsupervised(cfg, mentor))
    elif args.command == "finetune-classifier":
        result = _report(ex.finetune_classifier(args.checkpoint, cfg))
    elif args.command == "eval":
        _, test = ex.load_data(cfg)
        if test is None:
            raise DataError("eval needs test_images and test_labels in the config")
        acc, loss = evaluate(netlib.load(args.checkpoint), test)
        result = {"accuracy": acc, "loss": loss, "count": len(test)}
    elif args.command == "export-filters":
        out = args.out or Path(f"filters_layer{args.layer}.pgm")
        result = {"path": str(export_filters(args.checkpoint, args.layer, out))}
    elif args.command == "gradcheck":
        report = gradcheck(cfg, seed=cfg.seed, out_path=Path(cfg.out_dir) / "gradcheck.json")
        print(json.dumps({"max_rel_error": report["max_rel_error"], "passed": report["passed"]}))
        return 0 if report["passed"] else 1
    elif args.command == "redaction-grid":
        result = {"summary": str(ex.run_grid(cfg, mentor))}
    print(json.dumps(result))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return run(args)
    except UnrecoverableRun as exc:
        print(f"error: {exc}", file=sys.stderr)
        return UnrecoverableRun.exit_code
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except MentoredError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
