"""Command line entry point: ``lcsc <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .classifier import TrainParams
from .errors import LcscError
from .manifest import parse_manifest, split_counts
from .synthetic import write_texture_dataset

log = logging.getLogger("lcsc")


def _common(p: argparse.ArgumentParser, manifest=True, config=True) -> None:
    if config:
        p.add_argument("--config", type=Path, help="JSON config file")
    if manifest:
        p.add_argument("--manifest", type=Path, required=True, help="JSON Lines manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcsc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-codebook", help="learn per-layer codebooks")
    _common(p)

    p = sub.add_parser("extract", help="write a feature cache")
    _common(p)
    p.add_argument("--codebooks", type=Path, required=True, help="directory of .sdct files")
    p.add_argument("--split", action="append", help="restrict to these splits (repeatable)")

    p = sub.add_parser("train-eval", help="train the linear classifier and report accuracy")
    _common(p, manifest=False)
    p.add_argument("--train", type=Path, action="append", required=True,
                   help="training cache (repeat to combine pipelines)")
    p.add_argument("--test", type=Path, action="append", default=[],
                   help="test cache, paired with --train in order")
    p.add_argument("--train-split", default="train")
    p.add_argument("--test-split", default="test")
    p.add_argument("--c-cost", type=float)

    p = sub.add_parser("fit-parts", help="fit the part-location model")
    _common(p)

    p = sub.add_parser("align", help="vote head directions and emit part regions")
    _common(p)
    p.add_argument("--part-model", type=Path)

    p = sub.add_parser("synth", help="write a synthetic oriented-texture dataset")
    _common(p, manifest=False, config=False)
    p.add_argument("--per-class-train", type=int, default=20)
    p.add_argument("--per-class-test", type=int, default=20)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--size", type=int, default=96)
    return parser


def _config(args) -> harness.HarnessConfig:
    if getattr(args, "config", None):
        return harness.HarnessConfig.load(args.config)
    return harness.HarnessConfig()


def run(args) -> int:
    if args.command == "synth":
        path = write_texture_dataset(args.out, args.seed, args.per_class_train,
                                     args.per_class_test, args.classes, args.size)
        print(path)
        return 0

    cfg = _config(args)
    if args.command == "train-eval":
        params = cfg.classifier
        if args.c_cost is not None:
            params = TrainParams(args.c_cost, params.tolerance, params.max_epochs, params.seed)
        res = harness.cmd_train_eval(args.train, args.test, args.out, params, args.seed,
                                     cfg.digest() if args.config else "", args.train_split,
                                     args.test_split, args.threads)
        for name, acc in res.per_pipeline_accuracy.items():
            print(f"{name}\t{acc:.4f}")
        return 0

    entries = parse_manifest(args.manifest)
    tr, va, te = split_counts(entries)
    log.info("manifest: %d train / %d val / %d test", tr, va, te)

    if args.command == "train-codebook":
        for p in harness.cmd_train_codebook(cfg, entries, args.out, args.seed, args.threads):
            print(p)
        return 0
    if args.command == "extract":
        path, failures = harness.cmd_extract(cfg, entries, args.codebooks, args.out,
                                             args.threads, args.split)
        print(f"{path}: {len(failures)} failed")
        return 1 if failures else 0
    if args.command == "fit-parts":
        path, table = harness.cmd_fit_parts(entries, args.out)
        sys.stdout.write(table)
        return 0
    if args.command == "align":
        if args.part_model:
            raw = dict(cfg.raw)
            raw["alignment"] = {**raw.get("alignment", {}), "part_model": str(args.part_model)}
            cfg = harness.HarnessConfig.from_dict(raw)
        print(harness.cmd_align(cfg, entries, args.out, args.threads))
        return 0
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (LcscError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
