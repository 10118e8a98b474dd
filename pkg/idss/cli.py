# This code is part of the IDSS project.
#
# (C) Copyright IDSS developers 2024.
#
# This code is licensed under the Apache License, Version 2.0. You may
# obtain a copy of this license in the LICENSE.txt file in the root directory
# of this source tree or at http://www.apache.org/licenses/LICENSE-2.0.
#
# Any modifications or derivative works of this code must retain this
# copyright notice, and modified files need to carry a notice indicating
# that they have been altered from the originals.

"""Command-line entry point.

The whole overlay lives in one process. A workspace directory holds the overlay
configuration, the ingested CSV files and the submitted queries; every command rebuilds the
overlay from it and replays the simulation deterministically, so a query identifier printed
by ``idss submit`` can be fetched by a later ``idss fetch``.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from collections.abc import Sequence
from pathlib import Path

import toml

from .harness import (
    ConfigError,
    Scenario,
    ScenarioConfig,
    TablePlacement,
    Verdict,
    load_scenario,
    parse_scenario,
    run_scenario,
    sweep_ttl,
)
from .peer import UnknownUqiError
from .query_state import Uqi
from .storage import dump_schema, load_schema, read_csv

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_QUERY_ERROR = 2
EXIT_CONNECTIVITY = 3
EXIT_UNKNOWN_UQI = 4
EXIT_CONFIG_ERROR = 5

OVERLAY_FILE = "overlay.toml"
SCHEMA_FILE = "schema.toml"
DATA_DIR = "data"

_OVERLAY_FLAGS = ("peers", "fanout", "decay", "strategy", "loss", "seed")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Seed of the simulated overlay.")
    common.add_argument(
        "--log-level",
        default="WARNING",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="Verbosity of the diagnostics written to stderr.",
    )
    common.add_argument(
        "--workspace",
        type=Path,
        default=Path("idss-data"),
        help="Directory holding the overlay configuration, data and queries.",
    )

    overlay = argparse.ArgumentParser(add_help=False)
    overlay.add_argument("--peers", type=int, help="Number of peers.")
    overlay.add_argument("--fanout", type=int, help="Neighbors a query is forwarded to.")
    overlay.add_argument("--decay", help="Per-hop TTL decay factor, such as 3/4.")
    overlay.add_argument("--strategy", choices=("initiator", "intermediate"))
    overlay.add_argument("--loss", type=float, help="Message loss probability.")

    parser = argparse.ArgumentParser(
        prog="idss", description="Query relational data spread over a peer-to-peer overlay."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    init = commands.add_parser(
        "init-schema", parents=[common, overlay], help="Create a workspace for a schema."
    )
    init.add_argument("--schema", type=Path, required=True, help="Schema TOML file.")

    ingest = commands.add_parser("ingest", parents=[common], help="Load a CSV file into a peer.")
    ingest.add_argument("--data", type=Path, required=True, help="CSV file with a header line.")
    ingest.add_argument("--table", required=True)
    ingest.add_argument(
        "--peer", type=int, help="Peer index; omit to deal the rows round-robin to every peer."
    )

    submit = commands.add_parser("submit", parents=[common], help="Submit a query.")
    submit.add_argument("sql")
    submit.add_argument("--ttl", type=int, required=True, help="Time budget in milliseconds.")
    submit.add_argument("--peer", type=int, default=0, help="Index of the initiating peer.")
    submit.add_argument("--at", type=int, default=0, help="Virtual submission time in ms.")

    fetch = commands.add_parser("fetch", parents=[common], help="Poll a query by identifier.")
    fetch.add_argument("uqi")
    fetch.add_argument("--peer", type=int, help="Index of the peer to ask; default initiator.")
    fetch.add_argument("--at", type=int, help="Virtual time of the poll in ms.")

    scenario = commands.add_parser(
        "scenario", parents=[common, overlay], help="Run a scenario file and check it."
    )
    scenario.add_argument("path", type=Path)
    scenario.add_argument("--metrics", type=Path, help="Write per-query metrics CSV here.")
    scenario.add_argument("--event-log", type=Path, help="Write the event log here.")

    sweep = commands.add_parser(
        "sweep", parents=[common, overlay], help="Run a scenario file at several TTLs."
    )
    sweep.add_argument("path", type=Path)
    sweep.add_argument(
        "--ttl", type=int, action="append", required=True, help="A TTL to sweep; repeat."
    )
    return parser


def _with_overrides(config: ScenarioConfig, args: argparse.Namespace) -> ScenarioConfig:
    overrides = {
        name: getattr(args, name)
        for name in _OVERLAY_FLAGS
        if getattr(args, name, None) is not None
    }
    if not overrides:
        return config
    document = config.model_dump(by_alias=True, exclude_none=True)
    document.update(overrides)
    return parse_scenario(document)


def _load_workspace(args: argparse.Namespace) -> ScenarioConfig:
    path = args.workspace / OVERLAY_FILE
    if not path.exists():
        raise FileNotFoundError(f"No overlay in {args.workspace}; run `idss init-schema` first.")
    return _with_overrides(load_scenario(path), args)


def _save_workspace(config: ScenarioConfig, workspace: Path) -> None:
    document = config.model_dump(by_alias=True, exclude_none=True)
    base = workspace.resolve()
    # Paths inside the workspace are stored relative to it.
    if "schema" in document:
        document["schema"] = str(Path(document["schema"]).resolve().relative_to(base))
    for placement in document.get("placement", []):
        placement["csv"] = str(Path(placement["csv"]).resolve().relative_to(base))
    (workspace / OVERLAY_FILE).write_text(toml.dumps(document))


def _cmd_init_schema(args: argparse.Namespace) -> int:
    schemas = load_schema(args.schema)
    args.workspace.mkdir(parents=True, exist_ok=True)
    (args.workspace / DATA_DIR).mkdir(exist_ok=True)
    dump_schema(schemas, args.workspace / SCHEMA_FILE)
    document = {"peers": 8, "schema": SCHEMA_FILE}
    document.update(
        {name: getattr(args, name) for name in _OVERLAY_FLAGS if getattr(args, name) is not None}
    )
    config = parse_scenario(document, args.workspace)
    config.table_schemas()
    _save_workspace(config, args.workspace)
    print(f"{len(schemas)} tables, {config.peers} peers")
    return EXIT_OK


def _cmd_ingest(args: argparse.Namespace) -> int:
    config = _load_workspace(args)
    if args.peer is not None and not 0 <= args.peer < config.peers:
        print(f"idss: peer {args.peer} is not part of the overlay.", file=sys.stderr)
        return EXIT_CONNECTIVITY
    schemas = {schema.name: schema for schema in config.table_schemas()}
    if args.table not in schemas:
        raise ConfigError(f"table: unknown table {args.table}.")
    rows = read_csv(args.data.read_text(), schemas[args.table])
    target = args.workspace / DATA_DIR / f"{args.table}-{len(config.placement)}.csv"
    shutil.copyfile(args.data, target)
    placement = [
        *config.placement, TablePlacement(table=args.table, csv=str(target), peer=args.peer)
    ]
    _save_workspace(config.model_copy(update={"placement": placement}), args.workspace)
    print(f"{len(rows)} rows")
    return EXIT_OK


def _cmd_submit(args: argparse.Namespace) -> int:
    config = _load_workspace(args)
    if not 0 <= args.peer < config.peers:
        print(f"idss: peer {args.peer} is not part of the overlay.", file=sys.stderr)
        return EXIT_CONNECTIVITY
    workload = [item.model_dump() for item in config.workload]
    workload.append({"time": args.at, "initiator": args.peer, "sql": args.sql, "ttl": args.ttl})
    document = config.model_dump(by_alias=True, exclude_none=True)
    document["workload"] = workload
    candidate = parse_scenario(document)
    scenario = Scenario(candidate)
    scenario.run(args.at)
    uqi, error = scenario.submissions[-1]
    if uqi is None:
        print(f"idss: {error}", file=sys.stderr)
        return EXIT_QUERY_ERROR
    _save_workspace(candidate, args.workspace)
    print(uqi)
    return EXIT_OK


def _cmd_fetch(args: argparse.Namespace) -> int:
    config = _load_workspace(args)
    if args.peer is not None and args.peer not in range(config.peers):
        print(f"idss: peer {args.peer} is not part of the overlay.", file=sys.stderr)
        return EXIT_CONNECTIVITY
    try:
        uqi = Uqi.from_hex(args.uqi)
    except ValueError:
        print(f"idss: {args.uqi} is not a query identifier.", file=sys.stderr)
        return EXIT_UNKNOWN_UQI
    scenario = Scenario(config)
    scenario.run(args.at)
    try:
        status = scenario.fetch(uqi, args.peer)
    except UnknownUqiError as err:
        print(f"idss: {err}", file=sys.stderr)
        return EXIT_UNKNOWN_UQI
    print(status.state.name)
    if status.reason:
        print(f"idss: {status.reason}", file=sys.stderr)
    if status.result is not None:
        sys.stdout.write(status.result.to_csv())
    return EXIT_OK


def _cmd_scenario(args: argparse.Namespace) -> int:
    config = _with_overrides(load_scenario(args.path), args)
    report = run_scenario(config)
    sys.stdout.write(report.summary())
    if args.metrics is not None:
        args.metrics.write_text(report.metrics_csv())
    if args.event_log is not None:
        args.event_log.write_text(report.event_log)
    if not report.passed:
        return EXIT_MISMATCH
    if any(outcome.verdict is Verdict.REJECTED for outcome in report.outcomes):
        return EXIT_QUERY_ERROR
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _with_overrides(load_scenario(args.path), args)
    points = sweep_ttl(config, args.ttl)
    print("ttl,mean_peers_included,mean_completion_time,runs")
    for point in points:
        completion = "" if point.mean_completion_time is None else point.mean_completion_time
        print(f"{point.ttl},{point.mean_peers_included},{completion},{point.runs}")
    return EXIT_OK


_COMMANDS = {
    "init-schema": _cmd_init_schema,
    "ingest": _cmd_ingest,
    "submit": _cmd_submit,
    "fetch": _cmd_fetch,
    "scenario": _cmd_scenario,
    "sweep": _cmd_sweep,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Run one ``idss`` command and return its exit code."""
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as err:
        print(f"idss: {err}", file=sys.stderr)
        if args.command in ("ingest", "submit", "fetch") and not (
            args.workspace / OVERLAY_FILE
        ).exists():
            return EXIT_CONNECTIVITY
        return EXIT_CONFIG_ERROR
    except ConfigError as err:
        print(f"idss: {err}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except (OSError, ValueError) as err:
        print(f"idss: {err}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
