"""Command-line entry point: ``fairrisk <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 sweep finished
with failed cells.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .cohort import (CohortFormatError, GroupAttribute, InsufficientDataError, SchemaError,
                     SplitPlan, SyntheticSpec, generate_synthetic, load_cohort, make_split,
                     write_cohort)
from .experiment import (ConfigError, cell_seed, emit_report,
                         emit_summary, infer_attribute, load_config, load_experiment_cohort,
                         load_sweep, run_cell, run_sweep, synthetic_spec_from_config, dumps_json)
from .features import (TimelineFormatError, build_vocabulary, default_day_intervals,
                       extract_cohort, intervals_from_config, read_labels, read_timelines)
from .metrics import evaluate
from .model import design_matrix, load_checkpoint, predict_proba

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3
DATA_ERRORS = (CohortFormatError, SchemaError, InsufficientDataError, TimelineFormatError,
               FileNotFoundError)


def _attribute(args, path):
    if args.groups:
        return GroupAttribute(args.attribute, tuple(args.groups.split(",")))
    return infer_attribute(path, args.attribute)


def cmd_generate(args) -> int:
    if args.spec:
        d = yaml.safe_load(Path(args.spec).read_text(encoding="utf-8"))
        if not isinstance(d, dict):
            raise ConfigError("generator spec must be a mapping")
        spec = synthetic_spec_from_config(d) if "synthetic" in d else SyntheticSpec(**d)
    else:
        spec = synthetic_spec_from_config({"synthetic": "canonical", "seed": args.seed,
                                           "n": args.n})
    write_cohort(generate_synthetic(spec), args.out)
    return EXIT_OK


def cmd_extract(args) -> int:
    timelines = read_timelines(args.timelines)
    labels = read_labels(args.labels)
    if args.intervals:
        intervals = intervals_from_config(
            yaml.safe_load(Path(args.intervals).read_text(encoding="utf-8")))
    else:
        intervals = default_day_intervals()
    if args.train_ids:
        keep = set(Path(args.train_ids).read_text(encoding="utf-8").split())
        train_tl = [tl for tl in timelines if tl.record_id in keep]
    else:
        logging.warning("no --train-ids given: vocabulary and quintiles use every record")
        train_tl = timelines
    vocab = build_vocabulary(train_tl, intervals, args.min_quintile_obs)
    groups = (tuple(args.groups.split(",")) if args.groups
              else tuple(sorted({g for g, _ in labels.values()})))
    cohort = extract_cohort(timelines, labels, GroupAttribute(args.attribute, groups), vocab)
    write_cohort(cohort, args.out)
    if args.vocab_out:
        vocab.save(args.vocab_out)
    return EXIT_OK


def cmd_split(args) -> int:
    cohort = load_cohort(args.cohort, _attribute(args, args.cohort))
    plan = make_split(cohort, args.test_fraction, args.folds, args.seed)
    Path(args.out).write_text(json.dumps(plan.to_dict()), encoding="utf-8")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cohort = load_experiment_cohort(cfg)
    split = make_split(cohort, float(cfg.split.get("test_fraction", 0.1)),
                       int(cfg.split.get("folds", 10)), int(cfg.split.get("seed", 0)))
    seed = cell_seed(cfg.training_seed, args.fold)
    report = run_cell(cohort, split, args.fold, cfg.hp(), cfg.penalty_config(args.lam),
                      seed, checkpoint_path=Path(args.out))
    if args.report:
        Path(args.report).write_text(dumps_json(report.to_dict()), encoding="utf-8")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.parallelism:
        cfg.parallelism = args.parallelism
    result = run_sweep(cfg, resume=not args.no_resume)
    return EXIT_OK if result.complete else EXIT_PARTIAL


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    cohort = load_experiment_cohort(cfg)
    if args.split:
        split = SplitPlan.from_dict(json.loads(Path(args.split).read_text(encoding="utf-8")))
    else:
        split = make_split(cohort, float(cfg.split.get("test_fraction", 0.1)),
                           int(cfg.split.get("folds", 10)), int(cfg.split.get("seed", 0)))
    params, _, tlog = load_checkpoint(args.checkpoint)
    test = cohort.index_of(split.test_ids)
    f = predict_proba(params, design_matrix(cohort.features)[test])
    meta = dict(tlog.penalty) if tlog else {}
    report = evaluate(cohort.subset(test), f, metadata=meta)
    Path(args.out).write_text(dumps_json(report.to_dict()), encoding="utf-8")
    return EXIT_OK


def cmd_report(args) -> int:
    result = load_sweep(args.run_dir)
    if args.format == "summary":
        emit_summary(result, args.out)
    else:
        emit_report(result, args.format, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairrisk", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort file")
    g.add_argument("--out", required=True)
    g.add_argument("--spec", help="YAML generator spec (default: canonical cohort)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=20_000)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("extract", help="timelines + labels -> cohort file")
    e.add_argument("--timelines", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--attribute", required=True)
    e.add_argument("--groups", help="comma-separated group labels in index order")
    e.add_argument("--intervals", help="YAML list of {name, lower, upper} windows")
    e.add_argument("--train-ids", help="file of record ids used to build the vocabulary")
    e.add_argument("--min-quintile-obs", type=int, default=5)
    e.add_argument("--vocab-out")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    s = sub.add_parser("split", help="write a test/fold partition as JSON")
    s.add_argument("--cohort", required=True)
    s.add_argument("--attribute", default=None)
    s.add_argument("--groups")
    s.add_argument("--test-fraction", type=float, default=0.1)
    s.add_argument("--folds", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train and evaluate a single (fold, lambda) cell")
    t.add_argument("--config", required=True)
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--lambda", dest="lam", type=float, default=0.0)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", help="write the test-set report JSON here")
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("sweep", help="run the full lambda sweep of a config")
    w.add_argument("--config", required=True)
    w.add_argument("--output-dir")
    w.add_argument("--parallelism", type=int)
    w.add_argument("--no-resume", action="store_true")
    w.set_defaults(func=cmd_sweep)

    v = sub.add_parser("evaluate", help="evaluate a checkpoint on the config's test set")
    v.add_argument("--config", required=True)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--split", help="split JSON (default: recomputed from the config)")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="re-emit reports from a sweep directory")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--format", choices=("csv", "json", "summary"), default="csv")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
