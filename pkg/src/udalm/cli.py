"""Command line entry point.

    udalm generate  --out DIR [--config FILE] [--seed N]
    udalm train     --out DIR [--config FILE] [--seed N] [--regimes SO,UDALM] [--jobs N]
    udalm report    --out DIR [--config FILE]
    udalm sweep     --out DIR [--config FILE] [--seed N] [--jobs N]
    udalm adist     --checkpoint FILE --corpus DIR [--out FILE] [--seed N]

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .analysis import C_NOTE, HELD_OUT_NOTE
from .config import ConfigError, config_from_dict, load_config, with_overrides
from .corpus import DataError
from .encoder import CheckpointError
from .report import sweep_plot_data, write_report

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _regimes(text: str) -> list[str]:
    return [r.strip() for r in text.split(",") if r.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="udalm", description="Mixed classification + MLM domain adaptation experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True, jobs=False, regimes=False):
        p.add_argument("--config", type=Path, help="INI experiment config (defaults if omitted)")
        p.add_argument("--out", type=Path, required=True, help="experiment directory")
        if seed:
            p.add_argument("--seed", type=int, help="master seed (overrides [experiment] seed)")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if regimes:
            p.add_argument("--regimes", type=_regimes, help="comma-separated subset of SO,DPT,DAT,UDALM")

    common(sub.add_parser("generate", help="write corpus splits and a manifest"))
    common(sub.add_parser("train", help="run pretraining stages and all (regime, seed) runs"),
           jobs=True, regimes=True)
    common(sub.add_parser("report", help="evaluate runs and render tables"), seed=False)
    common(sub.add_parser("sweep", help="sample-efficiency sweep over target-data sizes"), jobs=True,
           regimes=True)
    p = sub.add_parser("adist", help="bound report (proxy A-distance) for one checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True, help="corpus directory written by generate")
    p.add_argument("--out", type=Path, help="TSV output file (stdout if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-domain", type=int, default=500, help="vectors drawn per domain")
    return parser


def _config(args, stored_ok: bool = False):
    if args.config is None and stored_ok:
        exp = args.out / "experiment.json"
        if exp.is_file():
            return config_from_dict(json.loads(exp.read_text())["config"])
    cfg = load_config(args.config)
    return with_overrides(cfg, getattr(args, "seed", None), getattr(args, "regimes", None))


def _run(args) -> int:
    if getattr(args, "jobs", 1) < 1:
        raise UsageError("--jobs must be >= 1")
    if args.command == "generate":
        path = pipeline.generate_corpus(_config(args), args.out)
        print(f"corpus written to {path}")
    elif args.command == "train":
        summary = pipeline.train(_config(args), args.out, args.jobs)
        print(f"trained {len(summary['trained'])} runs, reused {len(summary['cached'])}")
    elif args.command == "report":
        cfg = _config(args, stored_ok=True)
        paths = write_report(pipeline.evaluate_results(cfg, args.out), args.out / "report")
        for name in sorted(paths):
            print(paths[name])
    elif args.command == "sweep":
        cfg = _config(args)
        if args.regimes:
            cfg = replace(cfg, sweep_regimes=tuple(args.regimes))
        summary = pipeline.sweep(cfg, args.out, args.jobs)
        dest = args.out / "report"
        dest.mkdir(parents=True, exist_ok=True)
        path = dest / "sweep.dat"
        path.write_text(sweep_plot_data(pipeline.evaluate_sweep(cfg, args.out)), encoding="utf-8", newline="\n")
        print(f"trained {len(summary['trained'])} sweep runs, reused {len(summary['cached'])}; "
              f"plot data in {path}")
    elif args.command == "adist":
        b = pipeline.adist(args.checkpoint, args.corpus, args.per_domain, args.seed)
        text = (f"# {HELD_OUT_NOTE}\n# {C_NOTE}\n"
                "epsilon_S\td_A\tepsilon_D\tbound_value\tepsilon_T\n"
                f"{b.epsilon_s:.4f}\t{b.d_a:.4f}\t{b.eps_d:.4f}\t{b.bound_value:.4f}\t{b.epsilon_t:.4f}\n")
        if args.out:
            args.out.write_text(text, encoding="utf-8", newline="\n")
        else:
            sys.stdout.write(text)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"udalm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (UsageError, ConfigError) as exc:
        print(f"udalm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"udalm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"udalm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
