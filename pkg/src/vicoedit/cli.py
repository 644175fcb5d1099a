"""Command-line entry point: ``vicoedit run|verify|show``.

Exit status: 0 success, 1 validation error (bad config, model or manifest),
2 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiments import ConfigError, load_manifest, parse_config, run_experiment
from .flowmodel import ModelError
from .verify import SUITES, run_suite

EXIT_OK, EXIT_INVALID, EXIT_VERIFY = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors; argparse's default status 2 is reserved for verify
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vicoedit", description="Toy context-aware flow editing experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="execute an experiment config")
    run.add_argument("config")
    run.add_argument("--output-dir", help="override the config's output_dir")
    run.add_argument("--seed", type=int, help="override edit.seed (base seed for all repeats)")
    run.add_argument("--repeats", type=int, help="override repeats")
    run.add_argument("--quiet", action="store_true", help="print nothing but errors")

    ver = sub.add_parser("verify", help="run oracle cross-checks")
    ver.add_argument("suite", choices=[*SUITES, "all"])
    ver.add_argument("--quiet", action="store_true", help="only print failures and the summary")

    show = sub.add_parser("show", help="summarise a run manifest")
    show.add_argument("manifest")
    return p


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    changes = {}
    if args.output_dir is not None:
        changes["output_dir"] = str(Path(args.output_dir).resolve())
    if args.repeats is not None:
        if args.repeats < 1:
            raise ConfigError("repeats", "must be an integer >= 1")
        changes["repeats"] = args.repeats
    if args.seed is not None:
        changes["edit"] = cfg.edit.replace(seed=args.seed)
    cfg = cfg.replace(**changes)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    record = run_experiment(cfg, log=log)
    if not args.quiet:
        _print_summary(record.to_dict())
    return EXIT_OK


def _print_summary(manifest: dict) -> None:
    cfg = manifest["config"]
    print(f"task {cfg['task']}  repeats {len(manifest['repeats'])}  wall {manifest['wall_time']:.2f}s")
    print(f"config digest {manifest['config_digest']}")
    for arm, metrics in manifest["summary"].items():
        cells = "  ".join(f"{k}={v:.4g}" for k, v in metrics.items())
        print(f"  {arm:<14s} median  {cells}")


def _cmd_verify(args) -> int:
    report = None if args.quiet else print
    checks = run_suite(args.suite, report=report)
    failed = [c for c in checks if not c.passed]
    if args.quiet:
        for c in failed:
            print(c.line())
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def _cmd_show(args) -> int:
    record = load_manifest(args.manifest)
    _print_summary(record.to_dict())
    print(f"seeds {record.seeds}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"run": _cmd_run, "verify": _cmd_verify, "show": _cmd_show}[args.command]
    try:
        return handler(args)
    except (ConfigError, ModelError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
