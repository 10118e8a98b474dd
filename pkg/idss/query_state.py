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
"""Query identifiers, per-peer query records and their state machine."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from collections.abc import Iterator
from dataclasses import dataclass, replace
from enum import Enum

logger = logging.getLogger(__name__)

INITIATOR_SENTINEL = 0
"""The ``sender_key`` recorded on the peer that submitted a query. No peer may use this id."""


class QueryStateError(ValueError):
    """Base class for query state errors."""


class IllegalTransitionError(QueryStateError):
    """A state change that the state machine does not allow."""

    def __init__(self, from_state: State, to_state: State):
        """Create the error for the rejected edge."""
        super().__init__(f"Illegal transition from {from_state.name} to {to_state.name}.")
        self.from_state = from_state
        self.to_state = to_state


class SentBackOnInitiatorError(QueryStateError):
    """The initiator of a query tried to enter ``SENT_BACK``."""


@dataclass(frozen=True, order=True)
class Uqi:
    """A 128-bit unique query identifier, rendered as 32 hexadecimal digits."""

    value: int

    def __post_init__(self):
        """Check the range."""
        if not 0 <= self.value < 2**128:
            raise ValueError("A query identifier must fit in 128 bits.")

    def __str__(self) -> str:
        return f"{self.value:032x}"

    @classmethod
    def from_hex(cls, text: str) -> Uqi:
        """Parse the hexadecimal rendering of an identifier."""
        text = text.strip().lower()
        if len(text) != 32:
            raise ValueError(f"A query identifier has 32 hexadecimal digits, not {len(text)}.")
        try:
            return cls(int(text, 16))
        except ValueError:
            raise ValueError(f"{text!r} is not a hexadecimal query identifier.") from None


def new_uqi(canonical_sql: str, initiator: int, counter: int, seed: int) -> Uqi:
    """Derive the identifier of a submitted query.

    Args:
        canonical_sql: The canonical rendering of the query
        initiator: The id of the submitting peer
        counter: A value the initiator never reuses
        seed: The overlay seed

    Returns:
        A 128-bit identifier, stable for equal inputs.

    """
    digest = hashlib.blake2b(digest_size=16)
    for part in (canonical_sql, str(initiator), str(counter), str(seed)):
        encoded = part.encode()
        digest.update(len(encoded).to_bytes(8, "big"))
        digest.update(encoded)
    return Uqi(int.from_bytes(digest.digest(), "big"))


class State(Enum):
    """The processing states of a query on one peer."""

    QUEUED = "queued"
    LOCALLY_EXECUTED = "locally_executed"
    COMPLETED = "completed"
    SENT_BACK = "sent_back"
    FAILED = "failed"


def allowed_transitions(state: State, is_initiator: bool) -> frozenset[State]:
    """The states reachable in one step from ``state``."""
    if state is State.QUEUED:
        return frozenset({State.LOCALLY_EXECUTED, State.FAILED})
    if state is State.LOCALLY_EXECUTED:
        return frozenset({State.COMPLETED, State.FAILED})
    if state is State.COMPLETED and not is_initiator:
        return frozenset({State.SENT_BACK, State.FAILED})
    return frozenset()


@dataclass(frozen=True)
class QueryRecord:
    """One row of the QUERY table."""

    id_query: int
    """Local, monotonically increasing row id."""

    uqi: Uqi
    """The query identifier."""

    value: str
    """The query text."""

    arrival_time: int
    """Virtual time, in milliseconds, at which the query arrived."""

    ttl: int
    """The remaining time-to-live received with the query, in milliseconds."""

    sender_key: int
    """The peer the query came from, or :data:`INITIATOR_SENTINEL` on the initiator."""

    local_exec: bool = False
    """Whether the query ran on the local data."""

    completed: bool = False
    """Whether the merge buffer was released."""

    sent_back: bool = False
    """Whether the merged result was sent to the sender."""

    failed: bool = False
    """Whether processing failed on this peer."""

    reason: str | None = None
    """Why processing failed, if it did."""

    def __post_init__(self):
        """Check the flag combination."""
        if self.sent_back and self.is_initiator:
            raise SentBackOnInitiatorError("The initiator of a query never sends its result back.")
        if self.sent_back and not self.completed or self.completed and not self.local_exec:
            raise QueryStateError("Inconsistent query state flags.")

    @property
    def is_initiator(self) -> bool:
        """Whether this peer submitted the query."""
        return self.sender_key == INITIATOR_SENTINEL

    @property
    def state(self) -> State:
        """The state encoded by the flags."""
        if self.failed:
            return State.FAILED
        if self.sent_back:
            return State.SENT_BACK
        if self.completed:
            return State.COMPLETED
        if self.local_exec:
            return State.LOCALLY_EXECUTED
        return State.QUEUED


def transition(record: QueryRecord, to: State, reason: str | None = None) -> QueryRecord:
    """Move a record to a new state.

    Args:
        record: The current record
        to: The target state
        reason: For ``FAILED``, why processing failed

    Returns:
        The updated record.

    Raises:
        SentBackOnInitiatorError: ``to`` is ``SENT_BACK`` and the record belongs to the initiator.
        IllegalTransitionError: The state machine has no such edge.

    """
    if to is State.SENT_BACK and record.is_initiator:
        raise SentBackOnInitiatorError("The initiator of a query never sends its result back.")
    current = record.state
    if to not in allowed_transitions(current, record.is_initiator):
        raise IllegalTransitionError(current, to)
    if to is State.LOCALLY_EXECUTED:
        return replace(record, local_exec=True)
    if to is State.COMPLETED:
        return replace(record, completed=True)
    if to is State.SENT_BACK:
        return replace(record, sent_back=True)
    return replace(record, failed=True, reason=reason)


class InsertOutcome(Enum):
    """The result of :func:`record_if_new`."""

    INSERTED = "inserted"
    DUPLICATE = "duplicate"


class QueryTable:
    """The QUERY table of one peer, keyed by query identifier."""

    def __init__(self):
        """Create an empty table."""
        self._records: dict[Uqi, QueryRecord] = {}
        self._history: dict[Uqi, list[State]] = {}
        self._next_id = 1

    def __contains__(self, uqi: object) -> bool:
        return uqi in self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[QueryRecord]:
        return iter(self._records.values())

    def next_id(self) -> int:
        """The local row id the next inserted record takes."""
        return self._next_id

    def get(self, uqi: Uqi) -> QueryRecord | None:
        """The record of a query, if any."""
        return self._records.get(uqi)

    def insert(self, record: QueryRecord) -> InsertOutcome:
        """Store a record unless one with the same identifier exists."""
        if record.uqi in self._records:
            return InsertOutcome.DUPLICATE
        self._records[record.uqi] = record
        self._history[record.uqi] = [record.state]
        self._next_id = max(self._next_id, record.id_query + 1)
        return InsertOutcome.INSERTED

    def transition(self, uqi: Uqi, to: State, reason: str | None = None) -> QueryRecord:
        """Apply :func:`transition` to a stored record and store the result."""
        record = transition(self._records[uqi], to, reason)
        self._records[uqi] = record
        self._history[uqi].append(record.state)
        logger.debug("Query %s moved to %s", uqi, to.name)
        return record

    def history(self, uqi: Uqi) -> list[State]:
        """Every state a query went through, in order."""
        return list(self._history.get(uqi, []))

    def to_csv(self) -> str:
        """Dump the table as CSV, one line per record in insertion order."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(
            [
                "id_query",
                "uqi",
                "value",
                "arrival_time",
                "ttl",
                "sender_key",
                "local_exec",
                "completed",
                "sent_back",
                "failed",
            ]
        )
        for r in self._records.values():
            writer.writerow(
                [
                    r.id_query,
                    str(r.uqi),
                    r.value,
                    r.arrival_time,
                    r.ttl,
                    r.sender_key,
                    int(r.local_exec),
                    int(r.completed),
                    int(r.sent_back),
                    int(r.failed),
                ]
            )
        return buffer.getvalue()


def record_if_new(table: QueryTable, record: QueryRecord) -> InsertOutcome:
    """Insert a record only when its identifier is new to the table.

    Returns:
        ``INSERTED`` the first time a query identifier is seen, ``DUPLICATE`` afterwards. A
        duplicate leaves the table untouched.

    """
    return table.insert(record)
