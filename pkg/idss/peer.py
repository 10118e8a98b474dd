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
"""A peer of the overlay: query submission, forwarding, local execution and merging."""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from fractions import Fraction

from .merge import (
    DEFAULT_DECAY,
    AggregateMerger,
    AggregatePartial,
    MergeBuffer,
    MergeStrategy,
    MissingSubqueryResultError,
    Payload,
    decay_factor,
    finalize,
    merge_aggregates,
    on_deadline,
    subquery_bindings,
    ttl_decay,
)
from .overlay import (
    Endpoint,
    EventKind,
    Network,
    OverlayMessage,
    PeerId,
    QueryBroadcast,
    ResultReturn,
    broadcast_children,
)
from .query_state import (
    INITIATOR_SENTINEL,
    InsertOutcome,
    QueryRecord,
    QueryTable,
    State,
    Uqi,
    new_uqi,
    record_if_new,
)
from .sql import Query, QueryKind, QueryPlan, bind_subqueries, parse, plan_query, render
from .storage import Catalog, ColumnType, Recordset, StorageError

logger = logging.getLogger(__name__)


class PeerError(ValueError):
    """Base class for errors raised by a peer."""


class InvalidTtlError(PeerError):
    """The TTL of a submission is not a positive integer."""


class UnknownUqiError(PeerError):
    """The peer has no record of the query."""


class DuplicateSubmissionError(PeerError):
    """A submission counter was reused for the same query."""


@functools.lru_cache(maxsize=1024)
def _parse_cached(sql: str) -> Query:
    return parse(sql)


@dataclass(frozen=True)
class PeerConfig:
    """Protocol settings shared by the peers of an overlay."""

    fanout: int = 3
    """The number of neighbors a query is forwarded to."""

    decay: Fraction = DEFAULT_DECAY
    """The per-hop TTL decay factor."""

    strategy: MergeStrategy = MergeStrategy.INTERMEDIATE_COLLECTOR
    """Where partial results are merged."""

    provenance: bool = False
    """Tag every local row with its query identifier and reject foreign tags on merge."""

    seed: int = 0
    """The overlay seed, mixed into query identifiers."""

    aggregate_merger: AggregateMerger = field(default=merge_aggregates, compare=False)
    """How aggregate partials are combined."""

    def __post_init__(self):
        """Validate the settings."""
        if self.fanout < 1:
            raise ValueError("The fan-out must be a positive integer.")
        object.__setattr__(self, "decay", decay_factor(self.decay))
        object.__setattr__(self, "strategy", MergeStrategy(self.strategy))


@dataclass(frozen=True)
class QueryStatus:
    """What :meth:`PeerNode.fetch_results` reports about a query."""

    uqi: Uqi
    state: State
    result: Recordset | None = None
    """The final result; only on the initiator once the query completed."""

    reason: str | None = None
    """Why the query failed, if it did."""


@dataclass
class QueryMetrics:
    """Per-query counters of one peer."""

    duplicates_suppressed: int = 0
    late_or_lost: int = 0
    late_discarded: int = 0


@dataclass
class Submission:
    """The initiator's ledger entry for a submitted query."""

    uqi: Uqi
    plan: QueryPlan
    ttl: int
    submitted_at: int
    phases: list[Uqi] = field(default_factory=list)
    """The broadcast phases: subquery phases first, then the parent phase."""

    contributors: dict[Uqi, frozenset[PeerId]] = field(default_factory=dict)
    sub_results: list[Recordset | None] = field(default_factory=list)
    pending_subqueries: int = 0
    completed_at: int | None = None

    @property
    def completion_time(self) -> int | None:
        """Milliseconds from submission to the final result."""
        if self.completed_at is None:
            return None
        return self.completed_at - self.submitted_at

    @property
    def peers_included(self) -> int:
        """The number of peers whose data reached the final merge."""
        if not self.phases or self.phases[-1] not in self.contributors:
            return 0
        return len(self.contributors[self.phases[-1]])


class PeerNode(Endpoint):
    """One peer of the overlay.

    Every peer keeps a catalog following the shared schema and a QUERY table. A peer that
    receives a query from a user becomes its initiator: it plans the query, broadcasts it and
    merges the final result. A peer that receives a query from the overlay forwards it,
    evaluates it on its local data and returns its merged partial result.
    """

    def __init__(
        self,
        peer_id: PeerId,
        catalog: Catalog,
        network: Network,
        config: PeerConfig | None = None,
    ):
        """Create a peer and join it to the network.

        Args:
            peer_id: The ring id of the peer
            catalog: The local tables
            network: The simulated network to join
            config: Protocol settings

        """
        self.peer_id = peer_id
        self.catalog = catalog
        self.network = network
        self.config = config or PeerConfig()
        self.table = QueryTable()
        self.metrics: dict[Uqi, QueryMetrics] = {}
        self._buffers: dict[Uqi, MergeBuffer] = {}
        self._submissions: dict[Uqi, Submission] = {}
        self._phase_owner: dict[Uqi, tuple[Uqi, int | None]] = {}
        self._results: dict[Uqi, Recordset] = {}
        self._counter = 0
        self._fault: str | None = None
        network.join(peer_id, self)

    def __repr__(self) -> str:
        return f"PeerNode({self.peer_id:x})"

    def inject_fault(self, reason: str = "Injected local execution fault.") -> None:
        """Make every later local execution on this peer fail."""
        self._fault = reason

    def query_metrics(self, uqi: Uqi) -> QueryMetrics:
        """The counters of a query on this peer."""
        return self.metrics.setdefault(uqi, QueryMetrics())

    def submission(self, uqi: Uqi) -> Submission:
        """The ledger entry of a query submitted on this peer."""
        try:
            return self._submissions[uqi]
        except KeyError:
            raise UnknownUqiError(f"Query {uqi} was not submitted on this peer.") from None

    def _columns(self, table: str) -> list[tuple[str, ColumnType]]:
        return [(column.name, column.type) for column in self.catalog.schema(table).columns]

    # ------------------------------------------------------------------------------
    # Submission
    # ------------------------------------------------------------------------------

    def submit_query(self, sql: str, ttl: int, counter: int | None = None) -> Uqi:
        """Accept a query from a user and start distributing it.

        The query is parsed, classified and checked against the local schema before this
        returns. The broadcast starts at the current virtual time.

        Args:
            sql: The query text
            ttl: The time budget in milliseconds
            counter: The submission counter to derive the identifier from. Callers that
                replay a workload pass the position of the query so identifiers do not
                depend on the replay order. By default the peer's own sequence is used.

        Returns:
            The identifier of the query.

        Raises:
            InvalidTtlError: ``ttl`` is not a positive integer.
            DuplicateSubmissionError: ``counter`` was already used for the same query.
            SqlError: The query cannot be parsed or planned.
            StorageError: The query reads unknown tables or columns.

        """
        if isinstance(ttl, bool) or not isinstance(ttl, int) or ttl <= 0:
            raise InvalidTtlError("The TTL must be a positive number of milliseconds.")
        ast = parse(sql)
        plan = plan_query(ast, self.catalog.column_names())
        self.catalog.check_query(ast)

        if counter is None:
            counter = self._counter
        self._counter = max(self._counter, counter + 1)
        uqi = new_uqi(render(ast), self.peer_id, counter, self.config.seed)
        if uqi in self._submissions:
            raise DuplicateSubmissionError(f"Query {uqi} was already submitted on this peer.")
        now = self.network.now
        self.table.insert(
            QueryRecord(self.table.next_id(), uqi, sql, now, ttl, INITIATOR_SENTINEL)
        )
        submission = Submission(uqi=uqi, plan=plan, ttl=ttl, submitted_at=now)
        self._submissions[uqi] = submission
        self.network.record(EventKind.SUBMIT, self.peer_id, self.peer_id, uqi)
        logger.info("Query %s submitted on peer %x (%s)", uqi, self.peer_id, plan.kind.value)

        if plan.kind is not QueryKind.NESTED:
            self._schedule_phase(submission, uqi, None, render(plan.parent), ttl)
            return uqi
        submission.sub_results = [None] * len(plan.subplans)
        submission.pending_subqueries = len(plan.subplans)
        sub_ttl = (ttl // 2) // len(plan.subplans)
        for index, subplan in enumerate(plan.subplans):
            sub_sql = render(subplan.parent)
            phase = self._phase_uqi(uqi, index, sub_sql)
            self._schedule_phase(submission, phase, index, sub_sql, sub_ttl)
        return uqi

    def _phase_uqi(self, owner: Uqi, index: int, sql: str) -> Uqi:
        # Phases are numbered after their owner, so they follow its identifier.
        return new_uqi(sql, self.peer_id, owner.value + 1 + index, self.config.seed)

    def _schedule_phase(
        self, submission: Submission, phase: Uqi, index: int | None, sql: str, ttl: int
    ) -> None:
        submission.phases.append(phase)
        self._phase_owner[phase] = (submission.uqi, index)
        self.network.schedule(
            self.network.now, self.peer_id, functools.partial(self._start_phase, phase, sql, ttl)
        )

    def _start_phase(self, phase: Uqi, sql: str, ttl: int) -> None:
        if phase not in self.table:
            self.table.insert(
                QueryRecord(
                    self.table.next_id(), phase, sql, self.network.now, ttl, INITIATOR_SENTINEL
                )
            )
        logger.info("Query %s: phase %s starts with TTL %d ms", self._owner(phase), phase, ttl)
        children = self._forward(phase, sql, ttl, exclude=None, initiator=self.peer_id)
        if self.config.strategy is MergeStrategy.INITIATOR_COLLECTOR:
            expected = frozenset(self.network.ring) - {self.peer_id} if children else frozenset()
        else:
            expected = frozenset(children)
        self._process(phase, sql, ttl, expected, reply_to=None)

    def _owner(self, phase: Uqi) -> Uqi:
        return self._phase_owner.get(phase, (phase, None))[0]

    # ------------------------------------------------------------------------------
    # Overlay traffic
    # ------------------------------------------------------------------------------

    def on_message(self, message: OverlayMessage) -> None:
        """Dispatch a delivered message."""
        if isinstance(message.body, QueryBroadcast):
            self.handle_broadcast(message)
        else:
            self.handle_result(message)

    def handle_broadcast(self, message: OverlayMessage) -> None:
        """Process a query received from the overlay.

        The first copy of a query is recorded, forwarded and executed; later copies are
        discarded silently and counted as suppressed duplicates.
        """
        body = message.body
        assert isinstance(body, QueryBroadcast)
        record = QueryRecord(
            self.table.next_id(), body.uqi, body.sql, self.network.now, body.ttl, message.source
        )
        if record_if_new(self.table, record) is InsertOutcome.DUPLICATE:
            self.query_metrics(body.uqi).duplicates_suppressed += 1
            logger.debug("Peer %x dropped a duplicate of query %s", self.peer_id, body.uqi)
            return
        children = self._forward(body.uqi, body.sql, body.ttl, message.source, body.initiator)
        if self.config.strategy is MergeStrategy.INITIATOR_COLLECTOR:
            self._process(body.uqi, body.sql, body.ttl, frozenset(), reply_to=body.initiator)
        else:
            expected = frozenset(children)
            self._process(body.uqi, body.sql, body.ttl, expected, reply_to=message.source)

    def _forward(
        self, uqi: Uqi, sql: str, ttl: int, exclude: PeerId | None, initiator: PeerId
    ) -> list[PeerId]:
        forward_ttl = ttl_decay(ttl, self.config.decay)
        if forward_ttl == 0:
            return []
        children = [
            child
            for child in broadcast_children(self.network.ring, self.peer_id, self.config.fanout)
            if child != exclude
        ]
        for child in children:
            body = QueryBroadcast(uqi, sql, forward_ttl, self.peer_id, initiator)
            self.network.send(OverlayMessage(body, self.peer_id, child, self.network.now))
        return children

    def _execute(self, uqi: Uqi, sql: str) -> Payload:
        if self._fault is not None:
            raise StorageError(self._fault)
        query = _parse_cached(sql)
        result = self.catalog.execute_local(query)
        if query.is_aggregate:
            return AggregatePartial.from_recordset(result, query.aggregate_functions)
        if self.config.provenance:
            return Recordset(result.columns, result.rows, (str(uqi),) * len(result.rows))
        return result

    def _process(
        self,
        uqi: Uqi,
        sql: str,
        ttl: int,
        expected: frozenset[PeerId],
        reply_to: PeerId | None,
    ) -> None:
        now = self.network.now
        buffer = MergeBuffer(
            uqi=uqi,
            deadline=now + ttl,
            reply_to=reply_to,
            children=expected,
            children_expected=len(expected),
            merger=self.config.aggregate_merger,
        )
        self._buffers[uqi] = buffer
        try:
            payload = self._execute(uqi, sql)
        except ValueError as err:
            self.table.transition(uqi, State.FAILED, str(err))
            self.network.record(EventKind.FAILED, self.peer_id, self.peer_id, uqi)
            logger.warning("Query %s failed on peer %x: %s", uqi, self.peer_id, err)
            if reply_to is None:
                self._fail_submission(uqi, str(err))
            return
        self.table.transition(uqi, State.LOCALLY_EXECUTED)
        buffer.accumulated = payload
        buffer.contributors.add(self.peer_id)
        if reply_to is None:
            owner = self._owner(uqi)
            owner_record = self.table.get(owner)
            if owner != uqi and owner_record is not None and owner_record.state is State.QUEUED:
                self.table.transition(owner, State.LOCALLY_EXECUTED)
        if buffer.is_full:
            self._release(uqi)
        else:
            expire = functools.partial(self._expire, uqi)
            self.network.schedule(buffer.deadline, self.peer_id, expire)

    def _expire(self, uqi: Uqi) -> None:
        buffer = self._buffers.get(uqi)
        if buffer is None or buffer.closed:
            return
        self.network.record(EventKind.DEADLINE, self.peer_id, self.peer_id, uqi)
        self._release(uqi)

    def _release(self, uqi: Uqi) -> None:
        buffer = self._buffers[uqi]
        release = on_deadline(buffer, self.config.strategy)
        self.query_metrics(uqi).late_or_lost += release.missing
        self.table.transition(uqi, State.COMPLETED)
        if release.reply_to is None:
            self.network.record(EventKind.COMPLETE, self.peer_id, self.peer_id, uqi)
            self._complete_phase(uqi, release.payload, release.contributors)
            return
        self.network.record(EventKind.COMPLETE, self.peer_id, release.reply_to, uqi)
        body = ResultReturn(uqi, release.payload, self.peer_id, release.contributors)
        self.network.send(OverlayMessage(body, self.peer_id, release.reply_to, self.network.now))
        self.table.transition(uqi, State.SENT_BACK)

    def handle_result(self, message: OverlayMessage) -> None:
        """Merge a partial result received from the overlay.

        Results for unknown or failed queries, from peers the query was not sent to, or that
        arrive after the buffer was released are discarded and counted.
        """
        body = message.body
        assert isinstance(body, ResultReturn)
        metrics = self.query_metrics(body.uqi)
        record = self.table.get(body.uqi)
        buffer = self._buffers.get(body.uqi)
        if record is None or record.failed or buffer is None:
            metrics.late_or_lost += 1
            return
        if message.source not in buffer.children or message.source in buffer.answered:
            metrics.late_or_lost += 1
            return
        if buffer.closed:
            metrics.late_discarded += 1
            logger.debug("Peer %x discarded a late result of query %s", self.peer_id, body.uqi)
            return
        try:
            buffer.accept(body.payload, body.contributors, message.source)
        except ValueError as err:
            metrics.late_or_lost += 1
            logger.warning("Peer %x rejected a result of query %s: %s", self.peer_id, body.uqi, err)
            return
        if buffer.is_full:
            self._release(body.uqi)

    # ------------------------------------------------------------------------------
    # Initiator bookkeeping
    # ------------------------------------------------------------------------------

    def _fail_submission(self, phase: Uqi, reason: str) -> None:
        owner, index = self._phase_owner.get(phase, (phase, None))
        if owner == phase:
            logger.warning("Query %s failed: %s", owner, reason)
            return
        if index is not None:
            reason = str(
                MissingSubqueryResultError(f"Subquery {index} failed on the initiator: {reason}")
            )
        self._fail_phase_owner(owner, reason)

    def _complete_phase(
        self, phase: Uqi, payload: Payload | None, contributors: frozenset[PeerId]
    ) -> None:
        owner, index = self._phase_owner[phase]
        submission = self._submissions[owner]
        submission.contributors[phase] = contributors
        if self.table.get(owner).failed:  # type: ignore[union-attr]
            return
        plan = submission.plan
        assert payload is not None
        if index is not None:
            subplan = plan.subplans[index]
            submission.sub_results[index] = finalize(
                subplan, payload, self._columns(subplan.parent.table)
            )
            submission.pending_subqueries -= 1
            if submission.pending_subqueries == 0:
                self._start_parent_phase(submission)
            return
        try:
            result = finalize(
                plan, payload, self._columns(plan.source.table), submission.sub_results
            )
        except ValueError as err:
            self._fail_phase_owner(owner, str(err))
            return
        if owner != phase:
            self.table.transition(owner, State.COMPLETED)
        self._results[owner] = result
        submission.completed_at = self.network.now
        logger.info(
            "Query %s completed with %d rows from %d peers in %d ms",
            owner,
            len(result),
            len(contributors),
            submission.completion_time,
        )

    def _fail_phase_owner(self, owner: Uqi, reason: str) -> None:
        record = self.table.get(owner)
        if record is not None and record.state in (State.QUEUED, State.LOCALLY_EXECUTED):
            self.table.transition(owner, State.FAILED, reason)
        logger.warning("Query %s failed: %s", owner, reason)

    def _start_parent_phase(self, submission: Submission) -> None:
        plan = submission.plan
        try:
            values = subquery_bindings(plan, submission.sub_results)
        except MissingSubqueryResultError as err:
            self._fail_phase_owner(submission.uqi, str(err))
            return
        parent = plan.parent if plan.widened else bind_subqueries(plan.parent, values)
        sql = render(parent)
        ttl = submission.ttl - submission.ttl // 2
        phase = self._phase_uqi(submission.uqi, len(plan.subplans), sql)
        submission.phases.append(phase)
        self._phase_owner[phase] = (submission.uqi, None)
        self._start_phase(phase, sql, ttl)

    # ------------------------------------------------------------------------------
    # Results
    # ------------------------------------------------------------------------------

    def fetch_results(self, uqi: Uqi) -> QueryStatus:
        """Report the state of a query and, on its initiator once completed, its result.

        Raises:
            UnknownUqiError: The peer has no record of the query.

        """
        record = self.table.get(uqi)
        if record is None:
            raise UnknownUqiError(f"Query {uqi} is unknown to this peer.")
        result = self._results.get(uqi) if record.state is State.COMPLETED else None
        return QueryStatus(uqi, record.state, result, record.reason)
