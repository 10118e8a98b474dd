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

# Reminder: update the RST file in docs/apidocs when adding new interfaces.
"""Deterministic simulation of whole overlays, checked against a centralized oracle."""

from __future__ import annotations

import csv
import functools
import io
import logging
import math
import tracemalloc
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .datasets import generate_rows_uniform, partition_random, partition_round_robin
from .merge import AggregatePartial, decay_factor
from .overlay import LatencyDistribution, Network, PeerId, TransportModel, peer_id_from_name
from .peer import PeerConfig, PeerNode, QueryStatus, UnknownUqiError
from .query_state import INITIATOR_SENTINEL, State, Uqi
from .sql import QueryKind
from .storage import (
    Row,
    Recordset,
    SqliteCatalog,
    TableSchema,
    create_catalog,
    load_schema,
    read_csv,
    schemas_from_dicts,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A scenario configuration is invalid."""


# ----------------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------------


class LatencyModel(BaseModel):
    """One-way message latency, in milliseconds."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["uniform", "constant", "exponential"] = "uniform"
    low: int = Field(5, ge=0)
    high: int = Field(50, ge=0)
    mean: float = Field(20.0, gt=0)

    @model_validator(mode="after")
    def _check_bounds(self) -> LatencyModel:
        if self.high < self.low:
            raise ValueError("high must not be smaller than low")
        return self


class ChurnEvent(BaseModel):
    """A peer joining or leaving the ring at a given time."""

    model_config = ConfigDict(extra="forbid")

    time: int = Field(ge=0)
    action: Literal["join", "leave"]
    peer: int = Field(ge=0)


class WorkloadItem(BaseModel):
    """A query submitted to a peer at a given time."""

    model_config = ConfigDict(extra="forbid")

    time: int = Field(0, ge=0)
    initiator: int = Field(0, ge=0)
    sql: str
    ttl: int = Field(gt=0)


class TablePlacement(BaseModel):
    """A CSV file loaded into a table, on one peer or dealt round-robin."""

    model_config = ConfigDict(extra="forbid")

    table: str
    csv: str
    peer: Optional[int] = Field(None, ge=0)


class RandomData(BaseModel):
    """Uniformly random rows generated for a table and spread over the peers."""

    model_config = ConfigDict(extra="forbid")

    table: str
    rows: int = Field(ge=0)
    null_probability: float = Field(0.0, ge=0.0, le=1.0)
    placement: Literal["random", "round_robin"] = "random"


class ColumnModel(BaseModel):
    """A column of an inline table definition."""

    model_config = ConfigDict(extra="forbid")

    name: str
    type: Literal["integer", "real", "text", "timestamp"]
    nullable: bool = True


class TableModel(BaseModel):
    """An inline table definition."""

    model_config = ConfigDict(extra="forbid")

    name: str
    columns: list[ColumnModel] = Field(min_length=1)


class ScenarioConfig(BaseModel):
    """Everything needed to build and run a simulated overlay."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    peers: int = Field(ge=1)
    fanout: int = Field(3, ge=1)
    decay: Union[str, float] = "3/4"
    loss: float = Field(0.0, ge=0.0, le=1.0)
    seed: int = Field(0, ge=0)
    strategy: Literal["intermediate", "initiator"] = "intermediate"
    horizon: int = Field(10**9, gt=0)
    repetitions: int = Field(1, ge=1)
    backend: Literal["memory", "sqlite"] = "memory"
    provenance: bool = False
    schema_file: Optional[str] = Field(None, alias="schema")
    tables: list[TableModel] = Field(default_factory=list)
    placement: list[TablePlacement] = Field(default_factory=list)
    random_data: list[RandomData] = Field(default_factory=list)
    latency: LatencyModel = Field(default_factory=LatencyModel)
    churn: list[ChurnEvent] = Field(default_factory=list)
    workload: list[WorkloadItem] = Field(default_factory=list)
    faults: list[int] = Field(default_factory=list)
    mutate_merge: bool = False

    @field_validator("decay")
    @classmethod
    def _check_decay(cls, value: Union[str, float]) -> str:
        return str(decay_factor(value))

    @model_validator(mode="after")
    def _check_peer_indices(self) -> ScenarioConfig:
        joined = [event.peer for event in self.churn if event.action == "join"]
        if any(peer < self.peers for peer in joined) or len(set(joined)) != len(joined):
            raise ValueError("joining peers need new, distinct indices of at least `peers`")
        known = self.peers + len(joined)
        for item in self.workload:
            if item.initiator >= known:
                raise ValueError(f"workload initiator {item.initiator} does not exist")
        for peer in self.faults:
            if peer >= self.peers:
                raise ValueError(f"faulty peer {peer} does not exist")
        for placement in self.placement:
            if placement.peer is not None and placement.peer >= self.peers:
                raise ValueError(f"placement peer {placement.peer} does not exist")
        return self

    def table_schemas(self) -> list[TableSchema]:
        """The shared schema: inline tables followed by those of the schema file."""
        try:
            schemas = schemas_from_dicts(table.model_dump() for table in self.tables)
            if self.schema_file is not None:
                schemas.extend(load_schema(self.schema_file))
        except (OSError, ValueError) as err:
            raise ConfigError(f"schema: {err}") from err
        if not schemas:
            raise ConfigError("schema: at least one table must be defined.")
        return schemas


def _validation_message(err: ValidationError) -> str:
    lines = []
    for problem in err.errors():
        location = ".".join(str(part) for part in problem["loc"]) or "scenario"
        lines.append(f"{location}: {problem['msg']}")
    return "\n".join(lines)


def parse_scenario(document: Mapping, base_dir: str | Path = ".") -> ScenarioConfig:
    """Validate a scenario document, resolving relative paths against ``base_dir``.

    Raises:
        ConfigError: The document is invalid.

    """
    try:
        config = ScenarioConfig.model_validate(dict(document))
    except ValidationError as err:
        raise ConfigError(_validation_message(err)) from None
    base = Path(base_dir)
    updates: dict = {}
    if config.schema_file is not None:
        updates["schema_file"] = str(base / config.schema_file)
    if config.placement:
        updates["placement"] = [
            placement.model_copy(update={"csv": str(base / placement.csv)})
            for placement in config.placement
        ]
    return config.model_copy(update=updates)


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Read a scenario TOML file.

    Raises:
        ConfigError: The file cannot be read or does not describe a valid scenario.

    """
    path = Path(path)
    try:
        document = toml.load(path)
    except (OSError, toml.TomlDecodeError) as err:
        raise ConfigError(f"{path}: {err}") from None
    return parse_scenario(document, path.parent)


def dump_scenario(config: ScenarioConfig, path: str | Path) -> None:
    """Write a scenario TOML file readable by :func:`load_scenario`."""
    document = config.model_dump(by_alias=True, exclude_none=True)
    Path(path).write_text(toml.dumps(document))


# ----------------------------------------------------------------------------------
# Oracle and comparisons
# ----------------------------------------------------------------------------------


def oracle(
    sql: str, schemas: Sequence[TableSchema], rows: Mapping[str, Sequence[Row]]
) -> Recordset:
    """Evaluate a query centrally over the union of every peer's data with SQLite.

    Args:
        sql: The query as submitted
        schemas: The shared schema
        rows: All rows of every table

    Returns:
        The exact answer.

    """
    catalog = SqliteCatalog(schemas)
    try:
        for table, table_rows in rows.items():
            catalog.insert_rows(table, table_rows)
        return catalog.execute_sql(sql)
    finally:
        catalog.close()


def _sort_key(row: Row) -> tuple:
    return tuple((value is not None, value if value is not None else 0) for value in row)


def _close(a: object, b: object, rel_tol: float) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        if a is None or b is None:
            return a is b
        return math.isclose(a, b, rel_tol=rel_tol, abs_tol=1e-12)  # type: ignore[arg-type]
    return a == b


def recordsets_match(actual: Recordset, expected: Recordset, rel_tol: float = 1e-9) -> bool:
    """Whether two recordsets hold the same multiset of rows, reals within ``rel_tol``."""
    if actual.column_names != expected.column_names or len(actual) != len(expected):
        return False
    if Counter(actual.rows) == Counter(expected.rows):
        return True
    left = sorted(actual.rows, key=_sort_key)
    right = sorted(expected.rows, key=_sort_key)
    if all(
        all(_close(a, b, rel_tol) for a, b in zip(row_a, row_b))
        for row_a, row_b in zip(left, right)
    ):
        return True
    remaining = list(right)
    for row in left:
        for i, candidate in enumerate(remaining):
            if all(_close(a, b, rel_tol) for a, b in zip(row, candidate)):
                del remaining[i]
                break
        else:
            return False
    return True


def is_sub_multiset(actual: Recordset, expected: Recordset) -> bool:
    """Whether every row of ``actual`` appears in ``expected`` at least as often."""
    if actual.column_names != expected.column_names:
        return False
    return not Counter(actual.rows) - Counter(expected.rows)


# ----------------------------------------------------------------------------------
# Running scenarios
# ----------------------------------------------------------------------------------


class Verdict(str, Enum):
    """How a query's outcome compares with the oracle."""

    MATCH = "match"
    """Every data-holding peer contributed and the result equals the oracle."""

    SUBSET = "subset"
    """Partial coverage; the rows are a sub-multiset of the oracle rows."""

    PARTIAL = "partial"
    """Partial coverage of an aggregate or nested query; no exact comparison is possible."""

    MISMATCH = "mismatch"
    """The result contradicts the oracle."""

    FAILED = "failed"
    """The query failed on its initiator."""

    PENDING = "pending"
    """The query had not completed when the run stopped."""

    REJECTED = "rejected"
    """The submission was refused."""


@dataclass(frozen=True)
class QueryOutcome:
    """The outcome and metrics of one workload query."""

    index: int
    sql: str
    initiator: int
    uqi: Uqi | None
    state: State | None
    verdict: Verdict
    kind: QueryKind | None = None
    peers_included: int = 0
    duplicates_suppressed: int = 0
    late_or_lost: int = 0
    late_discarded: int = 0
    completion_time: int | None = None
    messages_total: int = 0
    initiator_inbound: int = 0
    result: Recordset | None = None
    expected: Recordset | None = None
    error: str | None = None

    @property
    def passed(self) -> bool:
        """Whether the outcome is consistent with the oracle."""
        return self.verdict is not Verdict.MISMATCH


@dataclass(frozen=True)
class RunReport:
    """Everything a scenario run produced."""

    outcomes: tuple[QueryOutcome, ...]
    digest: str
    """SHA-256 of the event log."""

    event_count: int
    end_time: int
    peak_memory_bytes: int = 0
    event_log: str = field(default="", repr=False)
    """The event log, one ``time,kind,src,dst,uqi`` line per event."""

    @property
    def passed(self) -> bool:
        """Whether every oracle comparison passed."""
        return all(outcome.passed for outcome in self.outcomes)

    def metrics_csv(self) -> str:
        """One CSV line of metrics per query."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(
            [
                "index",
                "uqi",
                "state",
                "verdict",
                "peers_included",
                "duplicates_suppressed",
                "late_or_lost",
                "late_discarded",
                "completion_time",
                "messages_total",
                "initiator_inbound",
            ]
        )
        for o in self.outcomes:
            writer.writerow(
                [
                    o.index,
                    "" if o.uqi is None else str(o.uqi),
                    "" if o.state is None else o.state.name,
                    o.verdict.value,
                    o.peers_included,
                    o.duplicates_suppressed,
                    o.late_or_lost,
                    o.late_discarded,
                    "" if o.completion_time is None else o.completion_time,
                    o.messages_total,
                    o.initiator_inbound,
                ]
            )
        return buffer.getvalue()

    def summary(self) -> str:
        """A short human-readable report."""
        lines = [
            f"events: {self.event_count}",
            f"end time: {self.end_time} ms",
            f"digest: {self.digest}",
        ]
        for o in self.outcomes:
            detail = f" ({o.error})" if o.error else ""
            lines.append(
                f"query {o.index}: {o.verdict.value}, {o.peers_included} peers, "
                f"{o.messages_total} messages{detail}"
            )
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines) + "\n"


def _drop_partial_merge(parts: Sequence[AggregatePartial]) -> AggregatePartial:
    """A broken combiner that keeps the first partial only."""
    return parts[0]


PeerData = Mapping[int, Mapping[str, Sequence[Row]]]


class Scenario:
    """A simulated overlay built from a :class:`ScenarioConfig`.

    Peers are identified by their index; index ``i`` maps to the ring id of the name
    ``peer-i``.
    """

    def __init__(self, config: ScenarioConfig, data: PeerData | None = None):
        """Build the overlay, load its data and schedule the workload and churn.

        Args:
            config: The scenario
            data: Rows per peer index and table. When given, replaces the placement and
                random data of ``config``.

        Raises:
            ConfigError: The schema or the data cannot be loaded.

        """
        self.config = config
        self.schemas = config.table_schemas()
        self.network = Network(
            TransportModel(
                latency=LatencyDistribution(
                    kind=config.latency.kind,
                    low=config.latency.low,
                    high=config.latency.high,
                    mean=config.latency.mean,
                ),
                loss=config.loss,
                seed=config.seed,
            )
        )
        self.peer_config = PeerConfig(
            fanout=config.fanout,
            decay=decay_factor(config.decay),
            strategy=config.strategy,
            provenance=config.provenance,
            seed=config.seed,
            **({"aggregate_merger": _drop_partial_merge} if config.mutate_merge else {}),
        )
        self.peers: dict[int, PeerNode] = {}
        for index in range(config.peers):
            self._add_peer(index)

        self.data: dict[int, dict[str, list[Row]]] = {}
        self._load_data(data)
        for index, tables in self.data.items():
            for table, rows in tables.items():
                try:
                    self.peers[index].catalog.insert_rows(table, rows)
                except ValueError as err:
                    raise ConfigError(f"data: peer {index}, table {table}: {err}") from err
        for index in config.faults:
            self.peers[index].inject_fault()

        for event in config.churn:
            if event.action == "join":
                action = functools.partial(self._add_peer, event.peer)
                self.network.schedule(event.time, INITIATOR_SENTINEL, action)
            else:
                action = functools.partial(self._remove_peer, event.peer)
                self.network.schedule(event.time, INITIATOR_SENTINEL, action)

        self.submissions: list[tuple[Uqi | None, str | None]] = [
            (None, None) for _ in config.workload
        ]
        for position, item in enumerate(config.workload):
            action = functools.partial(self._submit, position)
            self.network.schedule(item.time, INITIATOR_SENTINEL, action)

    def peer_id(self, index: int) -> PeerId:
        """The ring id of a peer index."""
        return peer_id_from_name(f"peer-{index}")

    def _add_peer(self, index: int) -> None:
        catalog = create_catalog(self.schemas, self.config.backend)
        self.peers[index] = PeerNode(self.peer_id(index), catalog, self.network, self.peer_config)

    def _remove_peer(self, index: int) -> None:
        if self.network.is_member(self.peer_id(index)):
            self.network.leave(self.peer_id(index))

    def _load_data(self, data: PeerData | None) -> None:
        def add(index: int, table: str, rows: Sequence[Row]) -> None:
            if index not in self.peers:
                raise ConfigError(f"data: peer {index} does not exist.")
            self.data.setdefault(index, {}).setdefault(table, []).extend(rows)

        if data is not None:
            for index, tables in data.items():
                for table, rows in tables.items():
                    add(index, table, rows)
            return
        schemas = {schema.name: schema for schema in self.schemas}
        for placement in self.config.placement:
            if placement.table not in schemas:
                raise ConfigError(f"placement: unknown table {placement.table}.")
            try:
                rows = read_csv(Path(placement.csv).read_text(), schemas[placement.table])
            except (OSError, ValueError) as err:
                raise ConfigError(f"placement: {placement.csv}: {err}") from err
            if placement.peer is not None:
                add(placement.peer, placement.table, rows)
            else:
                for index, part in enumerate(partition_round_robin(rows, self.config.peers)):
                    add(index, placement.table, part)
        rng = np.random.default_rng(self.config.seed)
        for generator in self.config.random_data:
            if generator.table not in schemas:
                raise ConfigError(f"random_data: unknown table {generator.table}.")
            rows = generate_rows_uniform(
                schemas[generator.table],
                generator.rows,
                null_probability=generator.null_probability,
                rand_seed=rng,
            )
            if generator.placement == "random":
                parts = partition_random(rows, self.config.peers, rand_seed=rng)
            else:
                parts = partition_round_robin(rows, self.config.peers)
            for index, part in enumerate(parts):
                add(index, generator.table, part)

    def _submit(self, position: int) -> None:
        item = self.config.workload[position]
        peer = self.peers.get(item.initiator)
        if peer is None or not self.network.is_member(peer.peer_id):
            self.submissions[position] = (None, f"Peer {item.initiator} is not part of the ring.")
            return
        try:
            uqi = peer.submit_query(item.sql, item.ttl, counter=position)
        except ValueError as err:
            self.submissions[position] = (None, str(err))
            logger.warning("Workload query %d was rejected: %s", position, err)
            return
        self.submissions[position] = (uqi, None)

    def run(self, until: int | None = None) -> int:
        """Run the simulation up to ``until`` (default: the configured horizon)."""
        return self.network.run(self.config.horizon if until is None else until)

    def union_rows(self) -> dict[str, list[Row]]:
        """Every row placed on any peer, per table."""
        union: dict[str, list[Row]] = {schema.name: [] for schema in self.schemas}
        for index in sorted(self.data):
            for table, rows in self.data[index].items():
                union[table].extend(rows)
        return union

    def fetch(self, uqi: Uqi, peer: int | None = None) -> QueryStatus:
        """Fetch a query's status from a peer, by default from its initiator.

        Raises:
            UnknownUqiError: The peer has no record of the query.

        """
        if peer is None:
            for position, (submitted, _) in enumerate(self.submissions):
                if submitted == uqi:
                    peer = self.config.workload[position].initiator
                    break
            else:
                raise UnknownUqiError(f"Query {uqi} is unknown to this overlay.")
        if peer not in self.peers:
            raise UnknownUqiError(f"Query {uqi} is unknown to this overlay.")
        return self.peers[peer].fetch_results(uqi)

    def report(self, peak_memory_bytes: int = 0) -> RunReport:
        """Collect metrics and oracle verdicts for every workload query."""
        union = self.union_rows()
        holders = {
            self.peer_id(index)
            for index, tables in self.data.items()
            if any(rows for rows in tables.values())
        }
        outcomes = []
        workload = zip(self.config.workload, self.submissions)
        for position, (item, (uqi, error)) in enumerate(workload):
            if uqi is None:
                outcomes.append(
                    QueryOutcome(
                        position,
                        item.sql,
                        item.initiator,
                        uqi=None,
                        state=None,
                        verdict=Verdict.REJECTED,
                        error=error,
                    )
                )
                continue
            outcomes.append(self._outcome(position, item, uqi, union, holders))
        return RunReport(
            outcomes=tuple(outcomes),
            digest=self.network.digest(),
            event_count=len(self.network.log),
            end_time=self.network.now,
            peak_memory_bytes=peak_memory_bytes,
            event_log=self.network.log_text(),
        )

    def _outcome(
        self,
        position: int,
        item: WorkloadItem,
        uqi: Uqi,
        union: Mapping[str, Sequence[Row]],
        holders: set[PeerId],
    ) -> QueryOutcome:
        initiator = self.peers[item.initiator]
        submission = initiator.submission(uqi)
        status = initiator.fetch_results(uqi)
        duplicates = late = discarded = 0
        for peer in self.peers.values():
            for phase in submission.phases:
                metrics = peer.metrics.get(phase)
                if metrics is not None:
                    duplicates += metrics.duplicates_suppressed
                    late += metrics.late_or_lost
                    discarded += metrics.late_discarded
        messages = sum(self.network.messages[phase] for phase in submission.phases)
        inbound = sum(
            self.network.inbound_results[(phase, initiator.peer_id)] for phase in submission.phases
        )

        expected = None
        if status.state is State.COMPLETED:
            expected = oracle(item.sql, self.schemas, union)
            assert status.result is not None
            full = len(submission.contributors) == len(submission.phases) and all(
                holders <= contributors for contributors in submission.contributors.values()
            )
            if full:
                verdict = (
                    Verdict.MATCH if recordsets_match(status.result, expected) else Verdict.MISMATCH
                )
            elif submission.plan.kind is QueryKind.SIMPLE:
                verdict = (
                    Verdict.SUBSET if is_sub_multiset(status.result, expected) else Verdict.MISMATCH
                )
            else:
                verdict = Verdict.PARTIAL
        elif status.state is State.FAILED:
            verdict = Verdict.FAILED
        else:
            verdict = Verdict.PENDING
        return QueryOutcome(
            index=position,
            sql=item.sql,
            initiator=item.initiator,
            uqi=uqi,
            state=status.state,
            verdict=verdict,
            kind=submission.plan.kind,
            peers_included=submission.peers_included,
            duplicates_suppressed=duplicates,
            late_or_lost=late,
            late_discarded=discarded,
            completion_time=submission.completion_time,
            messages_total=messages,
            initiator_inbound=inbound,
            result=status.result,
            expected=expected,
            error=status.reason,
        )


def run_scenario(config: ScenarioConfig, data: PeerData | None = None) -> RunReport:
    """Build, run and check a scenario.

    Args:
        config: The scenario
        data: Optional rows per peer index and table, see :class:`Scenario`

    Returns:
        The run report, with one outcome per workload query.

    Raises:
        ConfigError: The scenario cannot be built.

    """
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    try:
        scenario = Scenario(config, data)
        scenario.run()
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        if started:
            tracemalloc.stop()
    report = scenario.report(peak_memory_bytes=peak)
    logger.info("Scenario finished at %d ms with digest %s", report.end_time, report.digest)
    return report


@dataclass(frozen=True)
class SweepPoint:
    """The mean metrics of every run at one TTL."""

    ttl: int
    mean_peers_included: float
    mean_completion_time: float | None
    runs: int


def sweep_ttl(
    config: ScenarioConfig, ttl_values: Sequence[int], data: PeerData | None = None
) -> list[SweepPoint]:
    """Run a scenario at several TTLs and average the metrics.

    Every workload query gets the swept TTL. Each TTL is run ``config.repetitions`` times with
    seeds ``config.seed``, ``config.seed + 1``, ...

    Raises:
        ConfigError: Fewer than two distinct TTL values, or a non-positive TTL.

    """
    if len(set(ttl_values)) < 2:
        raise ConfigError("ttl: a sweep needs at least two distinct TTL values.")
    if any(ttl <= 0 for ttl in ttl_values):
        raise ConfigError("ttl: every swept TTL must be a positive number of milliseconds.")
    points = []
    for ttl in ttl_values:
        included: list[int] = []
        times: list[int] = []
        for repetition in range(config.repetitions):
            run_config = config.model_copy(
                update={
                    "seed": config.seed + repetition,
                    "workload": [item.model_copy(update={"ttl": ttl}) for item in config.workload],
                }
            )
            report = run_scenario(run_config, data)
            for outcome in report.outcomes:
                included.append(outcome.peers_included)
                if outcome.completion_time is not None:
                    times.append(outcome.completion_time)
        points.append(
            SweepPoint(
                ttl=ttl,
                mean_peers_included=float(np.mean(included)) if included else 0.0,
                mean_completion_time=float(np.mean(times)) if times else None,
                runs=config.repetitions,
            )
        )
    return points
