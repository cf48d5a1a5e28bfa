#!/usr/bin/env python3
"""
HCAN command-line interface.

Usage:
    python main.py generate-data --spec synthetic.cfg --out data/
    python main.py train --data data/ --config run.cfg --out model.ckpt
    python main.py train --data data/ --seeds 5 --report seeds.md
    python main.py evaluate --ckpt model.ckpt --data data/test.jsonl
    python main.py gradcheck --size small
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, Optional, Sequence

from .config import build_run_config, load_config_file, parse_overrides
from .dataio import SPLITS, Corpus, corpus_stats, generate_layout, generate_synthetic, load_corpus, write_corpus
from .errors import DataError, HcanError, UsageError
from .gradcheck import SIZES, GradCheckSuite
from .reports import save_json, save_report
from .trainer import (
    ABLATIONS,
    DATASET_PRESETS,
    evaluate,
    inspect_conversation,
    load_checkpoint,
    predict,
    run_ablation,
    run_seeds,
    seed_summary,
    train,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1 like every other configuration problem."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def configure_logging(verbose: bool = False) -> None:
    level = "DEBUG" if verbose else os.getenv("HCAN_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, force=True)


def _emit(doc: Dict[str, Any]) -> None:
    print(json.dumps(doc, indent=2))


def _write(doc: Dict[str, Any], path: str) -> None:
    result = save_json(doc, path)
    if not result["success"]:
        raise DataError(f"cannot write {path}: {result['error']}")


def _run_config(args):
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides: Dict[str, Any] = parse_overrides(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "preset", None):
        overrides["preset"] = args.preset
    return build_run_config(file_values, overrides)


def _conversations(corpus: Corpus, split: Optional[str]):
    if split is not None:
        return corpus.split(split)
    return tuple(conv for name in SPLITS for conv in corpus.split(name))


# Commands

def cmd_generate_data(args) -> int:
    if args.layout:
        corpus = generate_layout(args.layout, feature_dim=args.feature_dim, seed=args.layout_seed)
    else:
        corpus = generate_synthetic(_run_config(args).data)
    write_corpus(corpus, args.out)
    _emit(corpus_stats(corpus).to_dict())
    return 0


def cmd_stats(args) -> int:
    _emit(corpus_stats(load_corpus(args.data)).to_dict())
    return 0


def cmd_train(args) -> int:
    corpus = load_corpus(args.data)
    if args.resume:
        loaded = load_checkpoint(args.resume)
        loaded.check_compatible(corpus)
        if loaded.state is None:
            raise DataError(f"{args.resume} holds no training state to resume from")
        config = loaded.config
        logger.info(f"Resuming with the configuration stored in {args.resume}")
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        result = train(corpus, config, resume=loaded.state, checkpoint_path=args.out or args.resume,
                       stop_after_epoch=args.stop_after_epoch)
        return _report_single(corpus, result)

    run_config = _run_config(args)
    config = run_config.train
    print(run_config.to_json())

    if args.ablate:
        seeds = [config.seed + k for k in range(args.seeds or 1)]
        table = run_ablation(corpus, config, args.ablate, seeds=seeds, workers=args.workers)
        doc = table.to_dict()
        for row in doc["rows"]:
            mean = "n/a" if row["mean"] is None else f"{row['mean']:.4f}"
            std = "n/a" if row["std"] is None else f"{row['std']:.4f}"
            print(f"{row['label']:<10} weighted F1 {mean} +- {std} over seeds {row['seeds']}")
        return _finish_summary(doc, args.report)

    if args.seeds:
        seeds = [config.seed + k for k in range(args.seeds)]
        results = run_seeds(corpus, config, seeds, workers=args.workers)
        doc = seed_summary(results)
        for run in doc["runs"]:
            f1 = "n/a" if run["test_weighted_f1"] is None else f"{run['test_weighted_f1']:.4f}"
            status = "ok" if run["success"] else f"failed: {run['error']}"
            print(f"seed {run['seed']:>4}  test weighted F1 {f1}  ({status})")
        if doc["mean_test_weighted_f1"] is not None:
            print(f"mean {doc['mean_test_weighted_f1']:.4f} +- {doc['std_test_weighted_f1']:.4f}")
        return _finish_summary(doc, args.report)

    if not args.out:
        raise UsageError("train needs --out for a single run")
    result = train(corpus, config, checkpoint_path=args.out, stop_after_epoch=args.stop_after_epoch)
    return _report_single(corpus, result)


def _report_single(corpus: Corpus, result) -> int:
    test = corpus.split("test")
    if test and all(c.is_labeled for c in test):
        _emit(evaluate(result.model, test).to_dict(corpus.label_set))
    else:
        print(f"trained {len(result.history)} epochs; best val weighted F1 {result.best_val_f1}")
    return 0


def _finish_summary(doc: Dict[str, Any], report: Optional[str]) -> int:
    if report:
        result = save_report(doc, report)
        if not result["success"]:
            raise DataError(f"cannot write report {report}: {result['error']}")
    return 0 if doc.get("failed", 0) == 0 and all(r.get("failed", 0) == 0 for r in doc.get("rows", [])) else 3


def cmd_evaluate(args) -> int:
    loaded = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.data)
    loaded.check_compatible(corpus)
    metrics = evaluate(loaded.model, _conversations(corpus, args.split))
    _emit(metrics.to_dict(loaded.label_set))
    return 0


def cmd_predict(args) -> int:
    loaded = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.data)
    loaded.check_compatible(corpus)
    _write(predict(loaded.model, _conversations(corpus, args.split), loaded.label_set), args.out)
    return 0


def cmd_inspect(args) -> int:
    loaded = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.data)
    loaded.check_compatible(corpus)
    matches = [c for c in _conversations(corpus, None) if c.id == args.conversation]
    if not matches:
        raise DataError(f"unknown conversation id '{args.conversation}'")
    doc = inspect_conversation(loaded.model, matches[0], loaded.label_set)
    if args.out:
        _write(doc, args.out)
    else:
        _emit(doc)
    return 0


def cmd_gradcheck(args) -> int:
    suite = GradCheckSuite(size=args.size, seed=args.seed)
    report = suite.run_all()
    for check in report["checks"]:
        print(f"{check['status']}  {check['name']:<16} {check['worst_relative_error']:.3e}  (threshold {check['threshold']:.0e})")
    if args.out:
        _write(report, args.out)
    suite.raise_on_failure()
    print(f"all {report['passed']} checks passed in {report['duration_sec']:.1f}s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = _ArgumentParser(
        prog="hcan",
        description="Emotion recognition in conversation with HCAN",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    python main.py generate-data --out data/ --set num_emotions=3
    python main.py train --data data/ --out model.ckpt
    python main.py train --data data/ --seeds 5 --report seeds.html
    python main.py train --data data/ --ablate no_eae --seeds 5
    python main.py inspect --ckpt model.ckpt --data data/ --conversation test_0000
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common], help="Write a synthetic or benchmark-layout corpus")
    p.add_argument("--spec", "--config", dest="config", help="key=value file with synthetic settings")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key (repeatable)")
    p.add_argument("--layout", choices=["iemocap", "meld", "emorynlp"], help="Structure-only benchmark layout")
    p.add_argument("--feature-dim", type=int, default=4, help="Feature width for --layout (default: 4)")
    p.add_argument("--layout-seed", type=int, default=0, help="Seed for --layout content (default: 0)")
    p.add_argument("--out", required=True, help="Output corpus directory")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("stats", parents=[common], help="Print corpus statistics")
    p.add_argument("--data", required=True, help="Corpus directory or split file")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", parents=[common], help="Train, run seeds, or compare ablations")
    p.add_argument("--data", required=True, help="Corpus directory")
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key (repeatable)")
    p.add_argument("--preset", choices=sorted(DATASET_PRESETS), help="Hyperparameter preset")
    p.add_argument("--out", help="Checkpoint path for a single run")
    p.add_argument("--seed", type=int, help="Training seed")
    p.add_argument("--seeds", type=int, help="Run K seeds starting at --seed and report mean +- std")
    p.add_argument("--ablate", action="append", choices=ABLATIONS,
                   help="Ablation table: the full model plus one row per switch (repeatable)")
    p.add_argument("--workers", type=int, help="Parallel runs (default: HCAN_THREADS or CPU count)")
    p.add_argument("--report", help="Write the seed/ablation summary (.json, .md or .html)")
    p.add_argument("--resume", help="Continue from a checkpoint's training state")
    p.add_argument("--stop-after-epoch", type=int, help="Stop once this many epochs are complete")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="Print metrics of a checkpoint on labeled data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="Corpus directory or split file")
    p.add_argument("--split", choices=SPLITS, help="Only this split (default: every split present)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="Write per-utterance predictions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="Corpus directory or split file")
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", parents=[common], help="Dump distributions and attention for one conversation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--conversation", required=True, help="Conversation id")
    p.add_argument("--out", help="Output JSON file (default: stdout)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient self-check")
    p.add_argument("--size", choices=SIZES, default="small")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="Also write the report as JSON")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except HcanError as e:
        logger.debug("command failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
