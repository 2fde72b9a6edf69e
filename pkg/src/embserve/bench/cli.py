"""Command-line entry points.

Subcommands:
  gen          generate a workload trace file from a config
  run          run an experiment (config file and/or named experiment)
  report       print a comparison table from machine summaries
  experiments  list the named trend experiments
"""

import argparse
import json
import sys

from ..errors import EmbServeError
from ..workload import generate_trace, save_trace
from .config import ExperimentConfig, defaults_yaml, load_config
from .experiments import NAMED_EXPERIMENTS, named_experiment_config, run_experiment
from .report import comparison_table


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "backend", None) is not None:
        cfg.backend = args.backend
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    cfg.validate()
    return cfg


def _cmd_gen(args) -> int:
    cfg = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    rows = {t.id: t.rows for t in cfg.store.tables}
    trace = generate_trace(cfg.workload_config(), rows)
    save_trace(trace, args.out)
    print(f"wrote {len(trace.batches)} batches to {args.out} "
          f"(fingerprint {trace.fingerprint})")
    return 0


def _cmd_run(args) -> int:
    if args.print_defaults:
        print(defaults_yaml(), end="")
        return 0
    if args.config:
        cfg = load_config(args.config)
        if args.experiment:
            cfg.experiment = args.experiment
    elif args.experiment:
        cfg = named_experiment_config(args.experiment, seed=args.seed or 0)
    else:
        print("run: provide --config and/or --experiment", file=sys.stderr)
        return 2
    cfg = _apply_overrides(cfg, args)
    report = run_experiment(cfg)
    print(report.to_text())
    if cfg.out:
        text_path, machine_path = report.write(cfg.out)
        print(f"report: {text_path}\nsummary: {machine_path}")
    return 0


def _cmd_report(args) -> int:
    summaries = []
    for path in args.summaries:
        with open(path, "r", encoding="utf-8") as fh:
            summaries.append(json.load(fh))
    print(comparison_table(summaries))
    return 0


def _cmd_experiments(_args) -> int:
    for name in NAMED_EXPERIMENTS:
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embserve",
        description="Disaggregated embedding-lookup serving experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a trace file from a config")
    gen.add_argument("--config", required=True, help="experiment config (YAML)")
    gen.add_argument("--out", required=True, help="trace file to write")
    gen.add_argument("--seed", type=int, default=None)
    gen.set_defaults(fn=_cmd_gen)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", default=None, help="experiment config (YAML)")
    run.add_argument("--experiment", default=None,
                     help="named experiment (see `embserve experiments`)")
    run.add_argument("--seed", type=int, default=None, help="override the seed")
    run.add_argument("--backend", choices=["virtual", "threaded"], default=None)
    run.add_argument("--out", default=None, help="directory for report files")
    run.add_argument("--print-defaults", action="store_true",
                     help="print the full default config and exit")
    run.set_defaults(fn=_cmd_run)

    rep = sub.add_parser("report", help="comparison table from machine summaries")
    rep.add_argument("summaries", nargs="+", help="*.summary.json files")
    rep.set_defaults(fn=_cmd_report)

    exp = sub.add_parser("experiments", help="list named experiments")
    exp.set_defaults(fn=_cmd_experiments)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except EmbServeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
