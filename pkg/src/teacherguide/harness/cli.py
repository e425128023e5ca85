"""Command-line entry point.

Exit status: 0 on success, 2 on configuration or argument errors, 3 when a
run fails after validation (partial tables are still written, flagged).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import runner
from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

VERBS = {
    "sample": runner.run_experiment,
    "ablate-renoise": runner.run_ablation_renoise,
    "sweep-lambda": runner.sweep_lambda,
    "compare-steps": runner.compare_steps,
}
EXPORT_KINDS = tuple(runner.PLOT_HEADERS)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="teacherguide", description="Teacher-guided student sampling on Gaussian-mixture worlds.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in (*VERBS, "converge"):
        s = sub.add_parser(verb)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=_u64)
        s.add_argument("--out")
        s.add_argument("--workers", type=_positive, default=1)
        if verb != "converge":
            s.add_argument("--variant")
    e = sub.add_parser("export", help="turn a results.csv into plot data")
    e.add_argument("--kind", choices=EXPORT_KINDS, required=True)
    e.add_argument("--out", required=True, help="directory holding results.csv; plot CSV is written there")
    return p


def _write_status(out: str, status: str, detail: str = ""):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "status.json"), "w", encoding="utf-8") as fh:
        json.dump({"status": status, "detail": detail}, fh, sort_keys=True)
        fh.write("\n")


def _run(args) -> int:
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
    except (OSError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or config.output.path
    try:
        if args.verb == "converge":
            table = runner.run_convergence(config, args.workers)
            result = runner.ExperimentResult(table, {})
        else:
            result = VERBS[args.verb](config, args.workers, args.variant)
    except runner.RequestError as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except runner.PartialRunError as exc:
        runner.write_outputs(exc.partial, config, out)
        _write_status(out, "failed", repr(exc.__cause__))
        print(f"run failed: {exc.__cause__!r}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any failure after validation is a runtime failure
        _write_status(out, "failed", repr(exc))
        print(f"run failed: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME
    runner.write_outputs(result, config, out)
    _write_status(out, "ok")
    print(os.path.join(out, "results.csv"))
    return EXIT_OK


def _export(args) -> int:
    path = os.path.join(args.out, "results.csv")
    try:
        table = runner.ResultTable.read_csv(path)
        written = runner.export_plotdata(table, args.kind, args.out)
    except (OSError, KeyError, ValueError) as exc:  # unreadable or mismatched table
        print(f"export failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(written)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "export":
        return _export(args)
    return _run(args)


if __name__ == "__main__":
    sys.exit(main())
