"""Command-line entry point.

Subcommands: ``run`` (deterministic scenario run), ``serve`` (live relay +
control plane), ``verify`` (re-check invariants of a finished run). Exit
codes: 0 ok, 1 verify failure, 2 validation error, 3 runtime error,
4 bind failure.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys

from . import __version__
from .errors import (
    BindFailed,
    MissingArtifacts,
    ScenarioParseError,
    ScenarioValidationError,
)
from .scenario import schema_text

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_BIND = 4

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _configure_logging() -> None:
    level = os.environ.get("INCEPTSIM_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=_LEVELS.get(level, logging.WARNING), format="%(name)s %(levelname)s %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inceptsim", description="VR immersive-hijacking co-simulator")
    parser.add_argument("--version", action="version", version=f"inceptsim {__version__}")
    parser.add_argument("--schema", action="store_true", help="print the scenario JSON schema and exit")
    sub = parser.add_subparsers(dest="command")

    run_p = sub.add_parser("run", help="run a scenario deterministically")
    run_p.add_argument("scenario", help="path to the scenario JSON file")
    run_p.add_argument("--out", default="out", help="output directory for events.jsonl and report.json")
    run_p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path override applied to the scenario document",
    )

    serve_p = sub.add_parser("serve", help="host the live relay and control plane")
    serve_p.add_argument("config", help="path to the relay config JSON file")

    verify_p = sub.add_parser("verify", help="re-check invariants of a run directory")
    verify_p.add_argument("run_dir", help="directory containing events.jsonl and report.json")
    return parser


def cmd_run(args) -> int:
    from .runner import run

    try:
        report = run(args.scenario, args.out, args.overrides)
    except (ScenarioParseError, ScenarioValidationError) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(report.metrics, indent=2, default=str))
    print(f"event log: {report.event_log_path}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve_forever

    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    async def main() -> int:
        shutdown = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, shutdown.set)
            except NotImplementedError:
                pass
        try:
            await serve_forever(config, shutdown=shutdown)
        except BindFailed as exc:
            print(f"bind failed: {exc}", file=sys.stderr)
            return EXIT_BIND
        return EXIT_OK

    return asyncio.run(main())


def cmd_verify(args) -> int:
    from .verify import print_table, verify_exit_code, verify_run

    try:
        checks = verify_run(args.run_dir)
    except MissingArtifacts as exc:
        print(f"missing artifacts in {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print_table(checks)
    return verify_exit_code(checks)


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.schema:
        print(schema_text())
        return EXIT_OK
    if args.command == "run":
        return cmd_run(args)
    if args.command == "serve":
        return cmd_serve(args)
    if args.command == "verify":
        return cmd_verify(args)
    parser.print_help()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
