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
"""TTL decay, merging of partial results and final result reconstruction."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Union

from .query_state import Uqi
from .sql import (
    ColumnRef,
    QueryKind,
    QueryPlan,
    Scalar,
    Star,
    bind_subqueries,
    distinct_values,
)
from .storage import ColumnType, Recordset, compile_predicate, output_columns

logger = logging.getLogger(__name__)

DEFAULT_DECAY = Fraction(3, 4)

MERGEABLE_FUNCTIONS = ("sum", "count", "min", "max")


class MergeError(ValueError):
    """Base class for errors raised while combining results."""


class SchemaMismatchError(MergeError):
    """Two recordsets do not have the same columns."""


class SignatureMismatchError(MergeError):
    """Two aggregate partials do not compute the same functions."""


class MissingSubqueryResultError(MergeError):
    """A subquery produced no result before its deadline."""


class MergeStrategy(str, Enum):
    """Where partial results are merged."""

    INITIATOR_COLLECTOR = "initiator"
    """Every peer sends its local result straight to the initiator, which merges alone."""

    INTERMEDIATE_COLLECTOR = "intermediate"
    """Every peer merges its children's results with its own and answers its sender."""


def decay_factor(value: Fraction | float | str) -> Fraction:
    """Validate a TTL decay factor.

    Args:
        value: A fraction, a float or a string such as ``"3/4"``

    Returns:
        The factor as an exact fraction.

    Raises:
        ValueError: The factor is not strictly between 0 and 1.

    """
    try:
        factor = Fraction(value) if not isinstance(value, float) else Fraction(str(value))
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"{value!r} is not a valid decay factor.") from None
    if not 0 < factor < 1:
        raise ValueError("The decay factor must be strictly between 0 and 1.")
    return factor


def ttl_decay(old_ttl: int, x: Fraction = DEFAULT_DECAY) -> int:
    """The TTL a peer forwards with a query: ``floor(old_ttl * x)``.

    Args:
        old_ttl: The TTL the query arrived with, in milliseconds
        x: The decay factor

    Returns:
        The decayed TTL. Exact integer arithmetic; no forwarding happens once it reaches ``0``.

    """
    if old_ttl < 0:
        raise ValueError("The TTL must be a non-negative integer.")
    return old_ttl * x.numerator // x.denominator


@dataclass(frozen=True)
class AggregatePartial:
    """The partial values of an aggregate-only projection over part of the data."""

    functions: tuple[str, ...]
    """The function of every projected aggregate."""

    values: tuple[Scalar, ...]
    """The partial value of every projected aggregate."""

    def __post_init__(self):
        """Validate the signature."""
        if len(self.functions) != len(self.values):
            raise ValueError("An aggregate partial needs exactly one value per function.")
        for function in self.functions:
            if function not in MERGEABLE_FUNCTIONS:
                raise ValueError(
                    f"Only {', '.join(MERGEABLE_FUNCTIONS)} partials can be merged, not {function}."
                )

    @classmethod
    def from_recordset(cls, recordset: Recordset, functions: Sequence[str]) -> AggregatePartial:
        """Take the single row of a local aggregate result."""
        if len(recordset.rows) != 1:
            raise ValueError("A local aggregate result has exactly one row.")
        return cls(tuple(functions), recordset.rows[0])

    def to_recordset(self, columns: Sequence[tuple[str, ColumnType]]) -> Recordset:
        """Wrap the values as a one-row recordset."""
        return Recordset(tuple(columns), (self.values,))


Payload = Union[Recordset, AggregatePartial]


def merge_recordsets(a: Recordset, b: Recordset, uqi: Uqi | None = None) -> Recordset:
    """Multiset union of two partial results of the same query.

    Args:
        a: A partial result
        b: Another partial result
        uqi: When given, provenance tags must all name this query

    Returns:
        The rows of ``a`` followed by the rows of ``b``.

    Raises:
        SchemaMismatchError: The recordsets have different columns.
        MergeError: A provenance tag names another query.

    """
    if a.columns != b.columns:
        raise SchemaMismatchError(
            f"Cannot merge results with columns {list(a.column_names)} and {list(b.column_names)}."
        )
    provenance = None
    if a.provenance is not None or b.provenance is not None:
        provenance = (a.provenance or ("",) * len(a.rows)) + (b.provenance or ("",) * len(b.rows))
        if uqi is not None and any(tag != str(uqi) for tag in provenance):
            raise MergeError(f"A result tagged for another query was merged into query {uqi}.")
    return Recordset(a.columns, a.rows + b.rows, provenance)


def _combine(function: str, left: Scalar, right: Scalar) -> Scalar:
    if left is None:
        return right
    if right is None:
        return left
    if function in ("sum", "count"):
        return left + right  # type: ignore[operator]
    if function == "min":
        return min(left, right)  # type: ignore[type-var]
    return max(left, right)  # type: ignore[type-var]


def merge_aggregates(parts: Sequence[AggregatePartial]) -> AggregatePartial:
    """Combine aggregate partials computed over disjoint partitions.

    ``sum`` and ``count`` add, ``min`` and ``max`` take the extremum, and ``NULL`` partials are
    ignored. The result does not depend on the order of ``parts``, up to floating-point
    rounding of real sums.

    Raises:
        ValueError: ``parts`` is empty.
        SignatureMismatchError: The partials compute different functions.

    """
    if not parts:
        raise ValueError("At least one aggregate partial is required.")
    functions = parts[0].functions
    values = list(parts[0].values)
    for part in parts[1:]:
        if part.functions != functions:
            raise SignatureMismatchError(
                f"Cannot merge partials of {list(functions)} with partials of "
                f"{list(part.functions)}."
            )
        for i, function in enumerate(functions):
            values[i] = _combine(function, values[i], part.values[i])
    return AggregatePartial(functions, tuple(values))


AggregateMerger = Callable[[Sequence[AggregatePartial]], AggregatePartial]


def merge_payloads(
    a: Payload | None,
    b: Payload,
    uqi: Uqi | None = None,
    merger: AggregateMerger = merge_aggregates,
) -> Payload:
    """Merge a received payload into an accumulator, which may still be empty."""
    if a is None:
        return b
    if isinstance(a, AggregatePartial) and isinstance(b, AggregatePartial):
        return merger([a, b])
    if isinstance(a, Recordset) and isinstance(b, Recordset):
        return merge_recordsets(a, b, uqi)
    raise SchemaMismatchError("Cannot merge an aggregate partial with a plain recordset.")


def _reconstruct(
    plan: QueryPlan, merged: Recordset, final_columns: Sequence[tuple[str, ColumnType]]
) -> Recordset:
    """Rebuild avg columns from their sum/count pairs."""
    positions = plan.reconstruction.source_positions()
    if not plan.reconstruction.mapping:
        return Recordset(tuple(final_columns), merged.rows, merged.provenance)
    rows = []
    for row in merged.rows:
        values: list[Scalar] = []
        for position in positions:
            if isinstance(position, tuple):
                total, count = row[position[0]], row[position[1]]
                if not count or total is None:
                    values.append(None)
                else:
                    values.append(total / count)  # type: ignore[operator]
            else:
                values.append(row[position])
        rows.append(tuple(values))
    return Recordset(tuple(final_columns), tuple(rows))


def _as_recordset(payload: Payload, columns: Sequence[tuple[str, ColumnType]]) -> Recordset:
    if isinstance(payload, AggregatePartial):
        return payload.to_recordset(columns)
    return payload


def finalize(
    plan: QueryPlan,
    merged: Payload,
    schema_columns: Sequence[tuple[str, ColumnType]],
    subquery_results: Sequence[Recordset | None] = (),
) -> Recordset:
    """Turn the merged result of the broadcast plan into the answer to the submitted query.

    Args:
        plan: The distributed plan
        merged: The merged result of ``plan.parent`` over every contributing peer
        schema_columns: The ``(name, type)`` pairs of the table the parent query reads
        subquery_results: For nested plans, the finalized result of every subplan, in order

    Returns:
        A recordset shaped like the projection of the submitted query. ``avg`` columns are
        ``sum / count``, or ``NULL`` when the count is zero.

    Raises:
        MissingSubqueryResultError: A nested plan lacks a subquery result.

    """
    source = plan.source
    final_columns = output_columns(source, schema_columns)
    recordset = _as_recordset(merged, output_columns(plan.parent, schema_columns))
    if plan.kind is not QueryKind.NESTED or not plan.widened:
        return _reconstruct(plan, recordset, final_columns)

    values = subquery_bindings(plan, subquery_results)
    bound = bind_subqueries(source, values)
    assert bound.where is not None
    condition = compile_predicate(bound.where, recordset.columns)
    keep = [i for i, row in enumerate(recordset.rows) if condition(row) is True]
    names = recordset.column_names
    indices: list[int] = []
    for item in source.projection:
        if isinstance(item, Star):
            indices.extend(range(len(schema_columns)))
        else:
            assert isinstance(item, ColumnRef)
            indices.append(names.index(item.name))
    rows = tuple(tuple(recordset.rows[i][j] for j in indices) for i in keep)
    provenance = None
    if recordset.provenance is not None:
        provenance = tuple(recordset.provenance[i] for i in keep)
    return Recordset(tuple(final_columns), rows, provenance)


def subquery_bindings(
    plan: QueryPlan, subquery_results: Sequence[Recordset | None]
) -> dict[int, Scalar | tuple[Scalar, ...]]:
    """The values that replace the subquery holes of a nested plan.

    Plain-field subqueries bind their distinct values; aggregate subqueries bind their single
    value.

    Raises:
        MissingSubqueryResultError: A subquery result is missing.

    """
    if len(subquery_results) != len(plan.subplans) or any(r is None for r in subquery_results):
        raise MissingSubqueryResultError(
            "A subquery produced no result before its deadline; the query cannot be answered."
        )
    values: dict[int, Scalar | tuple[Scalar, ...]] = {}
    for index, (subplan, result) in enumerate(zip(plan.subplans, subquery_results)):
        assert result is not None
        column = [row[0] for row in result.rows]
        if subplan.kind is QueryKind.AGGREGATE:
            values[index] = column[0] if column else None
        else:
            values[index] = distinct_values(column)
    return values


# ----------------------------------------------------------------------------------
# Merge buffers
# ----------------------------------------------------------------------------------


@dataclass
class MergeBuffer:
    """Per-query accumulator on one peer while it waits for its children."""

    uqi: Uqi
    deadline: int
    reply_to: int | None
    """Where the merged result goes, or ``None`` on the initiator."""

    children: frozenset[int] = frozenset()
    """The peers the query was forwarded to."""

    children_expected: int = 0
    accumulated: Payload | None = None
    contributors: set[int] = field(default_factory=set)
    answered: set[int] = field(default_factory=set)
    closed: bool = False
    merger: AggregateMerger = merge_aggregates

    @property
    def children_received(self) -> int:
        """How many expected results arrived before release."""
        return len(self.answered)

    @property
    def is_full(self) -> bool:
        """Whether every expected result arrived."""
        return self.children_received >= self.children_expected

    def accept(self, payload: Payload, contributors: frozenset[int], sender: int) -> None:
        """Merge a child's result into the buffer."""
        self.accumulated = merge_payloads(self.accumulated, payload, self.uqi, self.merger)
        self.contributors |= contributors
        self.answered.add(sender)


@dataclass(frozen=True)
class Release:
    """What a peer does when its merge buffer closes."""

    uqi: Uqi
    reply_to: int | None
    payload: Payload | None
    contributors: frozenset[int]
    missing: int
    """Expected results that had not arrived."""


def on_deadline(buffer: MergeBuffer, strategy: MergeStrategy) -> Release:
    """Close a merge buffer and describe the result to send.

    Called at the deadline, or earlier once every expected result arrived. Later results for
    the same query are discarded by the caller.

    Args:
        buffer: The open buffer
        strategy: The merge strategy; it determines how many results the buffer expected

    Returns:
        The release action. ``reply_to`` is ``None`` on the initiator.

    """
    if buffer.closed:
        raise ValueError(f"The merge buffer of query {buffer.uqi} is already closed.")
    buffer.closed = True
    missing = max(0, buffer.children_expected - buffer.children_received)
    if missing:
        logger.debug(
            "Query %s released with %d missing results (%s)", buffer.uqi, missing, strategy.value
        )
    return Release(
        uqi=buffer.uqi,
        reply_to=buffer.reply_to,
        payload=buffer.accumulated,
        contributors=frozenset(buffer.contributors),
        missing=missing,
    )
