"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

from . import pipeline
from .baselines import load_external_predictions
from .data import ingest_csv, load_schema, temporal_split, write_csv
from .errors import DataError, NumericalError
from .evaluation import emit_report
from .screening import residual_filter
from .selection import MultiTaskFit, predict_batch
from .synthetic import GeneratorConfig, generate_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("surgsel")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_usage()}")


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _load(path, args):
    schema = load_schema(args.schema) if getattr(args, "schema", None) else None
    return ingest_csv(path, schema)


def _pipeline_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig(seed=args.seed)
    for name in (
        "mode",
        "k_filter",
        "surgeon_min",
        "optype_min",
        "min_task_size",
        "cv_folds",
        "cv_reps",
        "baseline_cv_reps",
        "min_test_per_task",
        "mi_k",
        "fs_k",
        "lasso_folds",
    ):
        if getattr(args, name, None) is not None:
            setattr(cfg, name, getattr(args, name))
    if getattr(args, "pool", None):
        cfg.pool = [p.strip() for p in args.pool.split(",") if p.strip()]
    if getattr(args, "baselines", None):
        cfg.baselines = [b.strip() for b in args.baselines.split(",") if b.strip()]
    return cfg


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_generate(args):
    doc = _read_json(args.config) if args.config else {}
    if args.seed_given:
        doc["seed"] = args.seed
    cfg = GeneratorConfig.from_dict(doc)
    data, _ = generate_dataset(cfg)
    if args.test_out:
        train, test = temporal_split(data, args.cutoff)
        write_csv(train, args.out)
        write_csv(test, args.test_out)
        log.info("wrote %d training and %d test records", len(train), len(test))
    else:
        write_csv(data, args.out)
        log.info("wrote %d records", len(data))
    if args.schema_out:
        from .data import schema_to_dict

        _write_json(args.schema_out, schema_to_dict(cfg.schema))


def cmd_filter(args):
    train = _load(args.train, args)
    cfg = _pipeline_config(args)
    if args.eligible:
        train = pipeline.eligible_training(train, cfg)
    ranking = residual_filter(train, args.k)
    for i, (name, score) in enumerate(ranking, start=1):
        print(f"{i}\t{name}\t{score:.6f}")
    if args.out:
        _write_json(args.out, {"ranking": [[n, s] for n, s in ranking]})


def cmd_select(args):
    cfg = _pipeline_config(args)
    train = pipeline.eligible_training(_load(args.train, args), cfg)
    sel = pipeline.select(train, cfg)
    _write_json(args.out, sel.to_dict(cfg))
    print(sel.rule.describe())


def cmd_fit(args):
    rule_doc = _read_json(args.rule)
    mt = pipeline.fit_from_rule(_load(args.train, args), rule_doc)
    _write_json(args.out, mt.to_dict())
    log.info("fitted %d tasks", len(mt.tasks))


def cmd_evaluate(args):
    cfg = _pipeline_config(args)
    train = _load(args.train, args)
    test = _load(args.test, args)
    external = load_external_predictions(args.external) if args.external else None
    report = pipeline.evaluate(train, test, cfg, external)
    emit_report(report, args.out)
    for a in report.aggregates:
        cv = "-" if a.train_cv_rmse_pct is None else f"{a.train_cv_rmse_pct:.2f}"
        te = "-" if a.test_rmse_pct is None else f"{a.test_rmse_pct:.2f}"
        print(f"{a.method}\ttrain_cv={cv}\ttest={te}")


def cmd_predict(args):
    mt = MultiTaskFit.from_dict(_read_json(args.model))
    data = _load(args.input, args)
    values, fallback = predict_batch(mt, data)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "predicted_log_duration", "predicted_minutes", "fallback"])
        for rid, v, f in zip(data.record_ids, values, fallback):
            w.writerow([rid, repr(float(v)), repr(math.exp(v)), int(f)])


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="surgsel", description="Multi-task covariate selection for surgery-duration prediction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, options_file=True):
        sp.add_argument("--seed", type=int, default=None)
        if options_file:
            sp.add_argument("--config", help="JSON file of option defaults (keys are option names)")
        sp.add_argument("--schema", help="JSON covariate schema; inferred from the CSV when omitted")

    def eligibility(sp):
        sp.add_argument("--surgeon-min", dest="surgeon_min", type=int)
        sp.add_argument("--optype-min", dest="optype_min", type=int)

    def selection(sp):
        sp.add_argument("--mode", choices=["surgeon", "interaction", "optype"])
        sp.add_argument("--k", dest="k_filter", type=int, help="pool size from the residual screen")
        sp.add_argument("--pool", help="comma-separated covariate pool (overrides the screen)")
        sp.add_argument("--min-task-size", dest="min_task_size", type=int)
        eligibility(sp)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", help="generator config JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--test-out", dest="test_out")
    g.add_argument("--cutoff", default="2018-01-01")
    g.add_argument("--schema-out", dest="schema_out")
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("filter", help="rank covariates by residual correlation")
    common(f)
    f.add_argument("--train")
    f.add_argument("--k", type=int, default=6)
    f.add_argument("--eligible", action="store_true", help="apply eligibility thresholds first")
    f.add_argument("--out")
    eligibility(f)
    f.set_defaults(func=cmd_filter)

    s = sub.add_parser("select", help="build the sample-size selection rule")
    common(s)
    s.add_argument("--train")
    s.add_argument("--out")
    selection(s)
    s.set_defaults(func=cmd_select)

    t = sub.add_parser("fit", help="fit task models for a saved rule")
    common(t)
    t.add_argument("--train")
    t.add_argument("--rule")
    t.add_argument("--out")
    t.set_defaults(func=cmd_fit)

    e = sub.add_parser("evaluate", help="cross-validate, test and report")
    common(e)
    e.add_argument("--train")
    e.add_argument("--test")
    e.add_argument("--out")
    e.add_argument("--baselines", help="comma-separated subset of lasso,mi,fs,global")
    e.add_argument("--external", help="CSV of record_id,predicted_log_duration")
    e.add_argument("--cv-folds", dest="cv_folds", type=int)
    e.add_argument("--cv-reps", dest="cv_reps", type=int)
    e.add_argument("--baseline-cv-reps", dest="baseline_cv_reps", type=int)
    e.add_argument("--min-test-per-task", dest="min_test_per_task", type=int)
    e.add_argument("--mi-k", dest="mi_k", type=int)
    e.add_argument("--fs-k", dest="fs_k", type=int)
    e.add_argument("--lasso-folds", dest="lasso_folds", type=int)
    selection(e)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("predict", help="score records with a saved model")
    common(r)
    r.add_argument("--model")
    r.add_argument("--in", dest="input")
    r.add_argument("--out")
    r.set_defaults(func=cmd_predict)
    return p


REQUIRED = {
    "filter": ("train",),
    "select": ("train", "out"),
    "fit": ("train", "rule", "out"),
    "evaluate": ("train", "test", "out"),
    "predict": ("model", "input", "out"),
}


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage())
    if args.command != "generate" and args.config:
        doc = _read_json(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        dests = {a.dest for a in sub._actions}
        unknown = sorted(set(doc) - dests)
        if unknown:
            raise UsageError(f"unknown option(s) in {args.config}: {unknown}")
        sub.set_defaults(**doc)
        args = parser.parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = pipeline.DEFAULT_SEED
    missing = [m for m in REQUIRED.get(args.command, ()) if getattr(args, m, None) in (None, "")]
    if missing:
        raise UsageError(f"surgsel {args.command}: missing required option(s): {', '.join('--' + m for m in missing)}")
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"surgsel: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except (DataError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"surgsel: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError, FloatingPointError) as exc:
        print(f"surgsel: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
