"""Command-line entry point.

Subcommands:

* ``generate``  — write a synthetic suite's source/target datasets
* ``finetune``  — train the checkpoints a plan needs (stage 1 only)
* ``adapt``     — run the full grid (stages 1-3), resumable
* ``report``    — turn a runs.jsonl into delta/absolute tables
* ``selftest``  — run the built-in oracle battery

Exit codes: 0 success, 1 validation error, 2 grid finished with failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import NeuroAdaptError
from ..selftest import run_selftest
from ..shiftbench.data import write_dataset
from ..shiftbench.suites import generate_suite
from .config import load_config, plan_from_dict
from .report import write_report
from .runner import read_records, run_experiment, train_checkpoints


def _cmd_generate(args) -> int:
    spec_doc = json.loads(Path(args.spec).read_text())
    if args.suite:
        spec_doc["kind"] = args.suite
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    # reuse the plan parser for schema validation of a single suite
    plan_doc = {"suites": [spec_doc], "encoders": [{"variant": "identity"}],
                "base_seed": 0, "output_dir": args.out}
    spec = plan_from_dict(plan_doc).suites[0]
    source, target = generate_suite(spec)
    out = Path(args.out)
    write_dataset(source, out / "source")
    write_dataset(target, out / "target")
    print(f"wrote {len(source.manifest.records)} source and "
          f"{len(target.manifest.records)} target records under {out}")
    return 0


def _cmd_finetune(args) -> int:
    plan = load_config(args.config)
    paths = train_checkpoints(plan, log=print)
    print(f"{len(paths)} checkpoints ready under "
          f"{Path(plan.output_dir) / 'checkpoints'}")
    return 0


def _cmd_adapt(args) -> int:
    plan = load_config(args.config)
    summary = run_experiment(plan, resume=args.resume, log=print)
    print(f"{summary.n_total} records ({summary.n_executed} executed, "
          f"{summary.n_failed} failed) -> {summary.records_path}")
    return 2 if summary.n_failed else 0


def _cmd_report(args) -> int:
    records = read_records(args.runs)
    report = write_report(records, args.out, per_batch_size=args.per_batch_size)
    print(f"report for {report['n_records']} records -> {args.out}")
    return 2 if report["n_failed"] else 0


def _cmd_selftest(_args) -> int:
    return 0 if run_selftest() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuroadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic shift suite")
    p.add_argument("--suite", help="suite kind override")
    p.add_argument("--spec", required=True, help="suite spec JSON file")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("finetune", help="train the plan's checkpoints")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("adapt", help="run the full experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true",
                   help="skip runs already present in runs.jsonl")
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("report", help="build delta/absolute tables")
    p.add_argument("--runs", required=True, help="runs.jsonl path")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--per-batch-size", action="store_true",
                   help="also emit per-batch-size stratified deltas")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("selftest", help="run the built-in oracle battery")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NeuroAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
