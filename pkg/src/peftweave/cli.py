"""Command-line entry point: ``peftweave <command> --config PATH``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, ExperimentConfig, load_config
from .peft import Variant
from .pipeline import Experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INCOMPLETE = 3

log = logging.getLogger("peftweave")


def _seeds(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peftweave", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="experiment YAML or JSON file")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for training cells")
        p.add_argument("--seeds", type=_seeds, default=None, help="override the config's seeds, e.g. 1,2,3")
        p.add_argument("--force", action="store_true", help="recompute even when results exist")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("synth", help="write synthetic corpora and task datasets"))
    common(sub.add_parser("pretrain", help="build the frozen backbone when the config asks for one"))
    p = common(sub.add_parser("train-lang", help="train language adapters and prompts"))
    p.add_argument("--language", help="only this language")
    p.add_argument("--kind", choices=("adapter", "prompt"), help="only this representation kind")
    p = common(sub.add_parser("train-task", help="train task representations"))
    p.add_argument("--task", help="only this task")
    p.add_argument("--source", help="only this source language")
    p.add_argument("--variant", help="only this configuration")
    p = common(sub.add_parser("matrix", help="train what is missing, then evaluate the transfer grid"))
    p.add_argument("--no-train", action="store_true", help="evaluate existing checkpoints only")
    common(sub.add_parser("report", help="summary, relative-improvement and heatmap tables"))
    return parser


LANG_JOB_KEYS = ("language", "kind", "seed")
TASK_JOB_KEYS = ("task", "variant", "source", "seed")


def _filter(jobs, keys, **wanted):
    out = []
    for job in jobs:
        fields = dict(zip(keys, job))
        if all(v is None or fields.get(k) == v for k, v in wanted.items()):
            out.append(job)
    return out


def run(args) -> int:
    cfg: ExperimentConfig = load_config(args.config)
    cfg.check_paths()
    seeds = args.seeds or list(cfg.seeds)
    if args.jobs < 1:
        raise ConfigError("--jobs: must be at least 1")
    out = os.environ.get("PEFTWEAVE_OUT") or None
    exp = Experiment(cfg, out, force=args.force, jobs=args.jobs)
    code = EXIT_OK

    if args.command == "synth":
        exp.synth()
    elif args.command == "pretrain":
        exp.pretrain()
    elif args.command == "train-lang":
        exp.pretrain()
        exp.synth()
        if args.language is not None and args.language not in [l.name for l in cfg.languages]:
            raise ConfigError(f"--language: unknown language {args.language!r}")
        exp._dispatch("lang", _filter(exp.language_jobs(seeds), LANG_JOB_KEYS, language=args.language, kind=args.kind))
    elif args.command == "train-task":
        exp.pretrain()
        exp.synth()
        variant = None
        if args.variant is not None:
            try:
                variant = Variant.parse(args.variant)
            except ValueError as e:
                raise ConfigError(f"--variant: {e}") from None
        jobs = _filter(exp.task_jobs(seeds), TASK_JOB_KEYS, task=args.task, variant=variant, source=args.source)
        exp._dispatch("task", jobs)
    elif args.command == "matrix":
        matrices = exp.run_matrix(seeds, train=not args.no_train)
        if not all(m.complete for m in matrices):
            code = EXIT_INCOMPLETE
    elif args.command == "report":
        if not exp.results_path().is_file():
            print(f"no results at {exp.results_path()}; run `matrix` first", file=sys.stderr)
            return EXIT_INCOMPLETE
        rep, complete = exp.report()
        print(f"report written to {rep}")
        if not complete:
            code = EXIT_INCOMPLETE

    if exp.stats.absent:
        code = EXIT_INCOMPLETE
    summary = {"command": args.command, "output_dir": str(exp.out), "seeds": seeds,
               **{k: v for k, v in vars(exp.stats).items()}}
    exp.out.mkdir(parents=True, exist_ok=True)
    (exp.out / "last_invocation.json").write_text(json.dumps(summary, indent=2))
    print(f"{args.command}: {exp.stats.training_steps} training steps, {exp.stats.runs_trained} runs trained, "
          f"{exp.stats.runs_skipped} reused, {exp.stats.cells_evaluated} cells evaluated, "
          f"{exp.stats.cells_cached} cached")
    if code == EXIT_INCOMPLETE:
        print("incomplete: " + "; ".join(exp.stats.absent or ["grid has missing cells"]), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
