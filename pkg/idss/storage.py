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
"""Per-peer relational storage and local query evaluation."""

from __future__ import annotations

import csv
import datetime
import io
import logging
import math
import numbers
import operator
import re
import sqlite3
from abc import ABC, abstractmethod
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Union

import toml

from .sql import (
    AggregateCall,
    And,
    ColumnRef,
    Comparison,
    InList,
    InSubquery,
    IsNull,
    Literal,
    Not,
    Or,
    Predicate,
    Query,
    Scalar,
    Star,
    SubqueryRef,
    iter_columns,
    iter_subqueries,
    parse,
    render,
)

logger = logging.getLogger(__name__)

_IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

Row = tuple[Scalar, ...]


class StorageError(ValueError):
    """Base class for storage errors."""


class EmptyCatalogError(StorageError):
    """A catalog was created without tables."""


class DuplicateTableError(StorageError):
    """Two tables share a name."""


class DuplicateColumnError(StorageError):
    """Two columns of a table share a name."""


class UnknownTableError(StorageError):
    """A table is not part of the catalog."""


class UnknownColumnError(StorageError):
    """A column is not part of the table."""


class TypeMismatchError(StorageError):
    """A value or an operation does not fit the column type."""


class ColumnType(str, Enum):
    """The column types of the shared schema."""

    INTEGER = "integer"
    REAL = "real"
    TEXT = "text"
    TIMESTAMP = "timestamp"

    @property
    def is_numeric(self) -> bool:
        """Whether values of this type are numbers."""
        return self in (ColumnType.INTEGER, ColumnType.REAL)


@dataclass(frozen=True)
class Column:
    """A typed column of a table."""

    name: str
    """The column name."""

    type: ColumnType
    """The type of the stored values."""

    nullable: bool = True
    """Whether ``NULL`` may be stored."""

    def __post_init__(self):
        """Validate the column."""
        if not _IDENTIFIER.match(self.name):
            raise ValueError(f"Invalid column name: {self.name!r}.")
        object.__setattr__(self, "type", ColumnType(self.type))


@dataclass(frozen=True)
class TableSchema:
    """The name and columns of a table, identical on every peer."""

    name: str
    """The table name."""

    columns: tuple[Column, ...]
    """The columns, in storage order."""

    def __post_init__(self):
        """Validate the table."""
        if not _IDENTIFIER.match(self.name):
            raise ValueError(f"Invalid table name: {self.name!r}.")
        if not self.columns:
            raise ValueError(f"Table {self.name} must have at least one column.")
        object.__setattr__(self, "columns", tuple(self.columns))
        seen: set[str] = set()
        for column in self.columns:
            if column.name in seen:
                raise DuplicateColumnError(
                    f"Column {column.name} appears more than once in table {self.name}."
                )
            seen.add(column.name)

    @property
    def column_names(self) -> tuple[str, ...]:
        """The column names, in storage order."""
        return tuple(column.name for column in self.columns)

    def column(self, name: str) -> Column:
        """Look up a column by name."""
        for column in self.columns:
            if column.name == name:
                return column
        raise UnknownColumnError(f"Table {self.name} has no column {name}.")

    def index_of(self, name: str) -> int:
        """The storage position of a column."""
        return self.column_names.index(self.column(name).name)


@dataclass(frozen=True)
class Recordset:
    """An ordered multiset of rows with named, typed columns."""

    columns: tuple[tuple[str, ColumnType], ...]
    """The ``(name, type)`` pairs of the columns."""

    rows: tuple[Row, ...] = ()
    """The rows. Duplicates are allowed."""

    provenance: tuple[str, ...] | None = None
    """When tagging is enabled, the query identifier each row was produced for."""

    def __post_init__(self):
        """Validate row arity and tag count."""
        object.__setattr__(self, "columns", tuple(tuple(c) for c in self.columns))
        object.__setattr__(self, "rows", tuple(tuple(row) for row in self.rows))
        width = len(self.columns)
        for row in self.rows:
            if len(row) != width:
                raise ValueError(
                    f"Every row must have {width} values; got a row with {len(row)} values."
                )
        if self.provenance is not None and len(self.provenance) != len(self.rows):
            raise ValueError("Provenance tags must be given for every row.")

    @property
    def column_names(self) -> tuple[str, ...]:
        """The column names."""
        return tuple(name for name, _ in self.columns)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        """Render the recordset as CSV with a header line."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.column_names)
        for row in self.rows:
            writer.writerow(["" if value is None else _format_value(value) for value in row])
        return buffer.getvalue()


def _format_value(value: Scalar) -> str:
    if isinstance(value, datetime.datetime):
        return value.isoformat(sep=" ")
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ----------------------------------------------------------------------------------
# Value conformance
# ----------------------------------------------------------------------------------


def naive_utc(value: datetime.datetime) -> datetime.datetime:
    """Convert an aware timestamp to naive UTC; naive ones are taken as UTC already."""
    if value.tzinfo is None:
        return value
    return value.astimezone(datetime.timezone.utc).replace(tzinfo=None)


def parse_timestamp(text: str) -> datetime.datetime:
    """Parse an ISO-8601 timestamp into naive UTC."""
    try:
        value = datetime.datetime.fromisoformat(text.strip())
    except ValueError:
        raise TypeMismatchError(f"{text!r} is not an ISO-8601 timestamp.") from None
    return naive_utc(value)


def conform_value(value: Any, column: Column) -> Scalar:
    """Check that a value may be stored in a column, normalizing numeric types.

    Raises:
        TypeMismatchError: The value does not fit the column.

    """
    if value is None:
        if not column.nullable:
            raise TypeMismatchError(f"Column {column.name} does not accept NULL.")
        return None
    if column.type is ColumnType.INTEGER:
        if isinstance(value, numbers.Integral) and not isinstance(value, bool):
            return int(value)
    elif column.type is ColumnType.REAL:
        if isinstance(value, numbers.Real) and not isinstance(value, bool):
            return float(value)
    elif column.type is ColumnType.TEXT:
        if isinstance(value, str):
            return value
    elif isinstance(value, datetime.datetime):
        return naive_utc(value)
    raise TypeMismatchError(
        f"The value {value!r} does not fit column {column.name} of type {column.type.value}."
    )


def _coerce_literal(value: Scalar, column_type: ColumnType | None) -> Scalar:
    """Coerce a literal for comparison against a column of the given type."""
    if value is None or column_type is None:
        return value
    if column_type is ColumnType.TIMESTAMP:
        if isinstance(value, str):
            return parse_timestamp(value)
        if isinstance(value, datetime.datetime):
            return naive_utc(value)
    elif column_type.is_numeric:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return value
    elif isinstance(value, str):
        return value
    raise TypeMismatchError(
        f"The literal {value!r} cannot be compared with a {column_type.value} column."
    )


def _literal_type(value: Scalar) -> ColumnType | None:
    if value is None:
        return None
    if isinstance(value, int):
        return ColumnType.INTEGER
    if isinstance(value, float):
        return ColumnType.REAL
    if isinstance(value, datetime.datetime):
        return ColumnType.TIMESTAMP
    return ColumnType.TEXT


def _compatible(left: ColumnType | None, right: ColumnType | None) -> bool:
    if left is None or right is None:
        return True
    return left == right or (left.is_numeric and right.is_numeric)


# ----------------------------------------------------------------------------------
# Predicate compilation
# ----------------------------------------------------------------------------------

# Evaluates a predicate on a row under three-valued logic: True, False or None (unknown).
RowPredicate = Callable[[Row], Union[bool, None]]

_OPERATORS: dict[str, Callable[[Any, Any], bool]] = {
    "=": operator.eq,
    "<>": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


def compile_predicate(
    predicate: Predicate, columns: Sequence[tuple[str, ColumnType]]
) -> RowPredicate:
    """Compile a predicate into a function evaluating it on rows with the given columns.

    Args:
        predicate: A predicate without subquery references
        columns: The ``(name, type)`` pairs of the rows it will be evaluated on

    Returns:
        A function returning ``True``, ``False`` or ``None`` for unknown.

    Raises:
        UnknownColumnError: The predicate names a column that is not in ``columns``.
        TypeMismatchError: The predicate compares values of incompatible types.
        StorageError: The predicate still holds a subquery.

    """
    positions = {name: (index, kind) for index, (name, kind) in enumerate(columns)}
    return _compile(predicate, positions)


def _compile_operand(
    operand: Any, positions: Mapping[str, tuple[int, ColumnType]]
) -> tuple[Callable[[Row], Scalar], ColumnType | None, Scalar]:
    """Return a getter, the static type and, for literals, the constant value."""
    if isinstance(operand, SubqueryRef):
        raise StorageError("Subqueries must be resolved before local execution.")
    if isinstance(operand, Literal):
        value = operand.value
        return (lambda row: value), _literal_type(value), value
    if operand.table is not None or operand.name not in positions:
        raise UnknownColumnError(f"Unknown column {operand.name}.")
    index, kind = positions[operand.name]
    return operator.itemgetter(index), kind, None


def _compile(predicate: Predicate, positions: Mapping[str, tuple[int, ColumnType]]) -> RowPredicate:
    if isinstance(predicate, And):
        parts = [_compile(child, positions) for child in predicate.operands]

        def conjunction(row: Row) -> bool | None:
            result: bool | None = True
            for part in parts:
                value = part(row)
                if value is False:
                    return False
                if value is None:
                    result = None
            return result

        return conjunction
    if isinstance(predicate, Or):
        parts = [_compile(child, positions) for child in predicate.operands]

        def disjunction(row: Row) -> bool | None:
            result: bool | None = False
            for part in parts:
                value = part(row)
                if value is True:
                    return True
                if value is None:
                    result = None
            return result

        return disjunction
    if isinstance(predicate, Not):
        inner = _compile(predicate.operand, positions)

        def negation(row: Row) -> bool | None:
            value = inner(row)
            return None if value is None else not value

        return negation
    if isinstance(predicate, IsNull):
        getter, _, _ = _compile_operand(predicate.operand, positions)
        return lambda row: getter(row) is None
    if isinstance(predicate, InSubquery):
        raise StorageError("Subqueries must be resolved before local execution.")
    if isinstance(predicate, InList):
        getter, kind, _ = _compile_operand(predicate.operand, positions)
        members = [_coerce_literal(literal.value, kind) for literal in predicate.values]
        has_null = any(member is None for member in members)
        present = [member for member in members if member is not None]
        for member in present:
            if not _compatible(kind, _literal_type(member)):
                raise TypeMismatchError(
                    f"IN list value {member!r} does not match the operand type."
                )

        def membership(row: Row) -> bool | None:
            value = getter(row)
            if value is None:
                return None
            if any(value == member for member in present):
                return True
            return None if has_null else False

        return membership
    return _compile_comparison(predicate, positions)


def _compile_comparison(
    predicate: Comparison, positions: Mapping[str, tuple[int, ColumnType]]
) -> RowPredicate:
    left, left_type, left_value = _compile_operand(predicate.left, positions)
    right, right_type, right_value = _compile_operand(predicate.right, positions)
    if isinstance(predicate.left, Literal) and right_type is not None:
        left_constant = _coerce_literal(left_value, right_type)
        left = lambda row: left_constant  # noqa: E731
        left_type = right_type if left_constant is not None else None
    if isinstance(predicate.right, Literal) and left_type is not None:
        right_constant = _coerce_literal(right_value, left_type)
        right = lambda row: right_constant  # noqa: E731
        right_type = left_type if right_constant is not None else None
    if not _compatible(left_type, right_type):
        raise TypeMismatchError(
            f"Cannot compare {left_type.value if left_type else 'NULL'} "
            f"with {right_type.value if right_type else 'NULL'}."
        )
    compare = _OPERATORS[predicate.op]

    def comparison(row: Row) -> bool | None:
        a = left(row)
        b = right(row)
        if a is None or b is None:
            return None
        return compare(a, b)

    return comparison


# ----------------------------------------------------------------------------------
# Local evaluation
# ----------------------------------------------------------------------------------


def output_columns(
    query: Query, columns: Sequence[tuple[str, ColumnType]]
) -> tuple[tuple[str, ColumnType], ...]:
    """The ``(name, type)`` pairs a query produces over rows with the given columns.

    Raises:
        UnknownColumnError: The projection names an unknown column.
        TypeMismatchError: ``sum`` or ``avg`` is applied to a non-numeric column.

    """
    types = dict(columns)
    result: list[tuple[str, ColumnType]] = []
    for item in query.projection:
        if isinstance(item, Star):
            result.extend(columns)
        elif isinstance(item, ColumnRef):
            if item.table is not None or item.name not in types:
                raise UnknownColumnError(f"Unknown column {item.name}.")
            result.append((item.name, types[item.name]))
        elif item.column is None:
            result.append((item.label, ColumnType.INTEGER))
        else:
            if item.column not in types:
                raise UnknownColumnError(f"Unknown column {item.column}.")
            kind = types[item.column]
            if item.function in ("sum", "avg") and not kind.is_numeric:
                raise TypeMismatchError(
                    f"{item.function} requires a numeric column, not {kind.value}."
                )
            if item.function == "count":
                kind = ColumnType.INTEGER
            elif item.function == "avg":
                kind = ColumnType.REAL
            result.append((item.label, kind))
    return tuple(result)


def aggregate_values(function: str, values: Sequence[Scalar], kind: ColumnType) -> Scalar:
    """Apply an aggregate function to the values of one column.

    ``NULL`` values are ignored. Over no values ``count`` is ``0`` and the others are ``NULL``.
    """
    present = [value for value in values if value is not None]
    if function == "count":
        return len(present)
    if not present:
        return None
    if function == "sum":
        if kind is ColumnType.INTEGER:
            return sum(present)  # type: ignore[arg-type]
        return math.fsum(present)  # type: ignore[arg-type]
    if function == "avg":
        return math.fsum(present) / len(present)  # type: ignore[arg-type]
    if function == "min":
        return min(present)  # type: ignore[type-var]
    if function == "max":
        return max(present)  # type: ignore[type-var]
    raise ValueError(f"Unknown aggregate function {function}.")


def evaluate(
    query: Query, columns: Sequence[tuple[str, ColumnType]], rows: Iterable[Row]
) -> Recordset:
    """Evaluate a subquery-free query over rows with the given columns."""
    result_columns = output_columns(query, columns)
    selected: Iterable[Row] = rows
    if query.where is not None:
        condition = compile_predicate(query.where, columns)
        selected = [row for row in rows if condition(row) is True]
    selected = list(selected)

    positions = {name: index for index, (name, _) in enumerate(columns)}
    types = dict(columns)
    if query.is_aggregate:
        values: list[Scalar] = []
        for item in query.projection:
            assert isinstance(item, AggregateCall)
            if item.column is None:
                values.append(len(selected))
                continue
            index = positions[item.column]
            values.append(
                aggregate_values(
                    item.function, [row[index] for row in selected], types[item.column]
                )
            )
        return Recordset(result_columns, (tuple(values),))

    indices: list[int] = []
    for item in query.projection:
        if isinstance(item, Star):
            indices.extend(range(len(columns)))
        else:
            assert isinstance(item, ColumnRef)
            indices.append(positions[item.name])
    getter = operator.itemgetter(*indices)
    if len(indices) == 1:
        return Recordset(result_columns, tuple((getter(row),) for row in selected))
    return Recordset(result_columns, tuple(getter(row) for row in selected))


# ----------------------------------------------------------------------------------
# Catalogs
# ----------------------------------------------------------------------------------


class Catalog(ABC):
    """The tables of one peer, all following the shared schema."""

    def __init__(self, schemas: Sequence[TableSchema]):
        """Create an empty catalog.

        Raises:
            EmptyCatalogError: ``schemas`` is empty.
            DuplicateTableError: Two tables share a name.

        """
        if not schemas:
            raise EmptyCatalogError("A catalog needs at least one table.")
        self._schemas: dict[str, TableSchema] = {}
        for schema in schemas:
            if schema.name in self._schemas:
                raise DuplicateTableError(f"Table {schema.name} is defined more than once.")
            self._schemas[schema.name] = schema

    @property
    def schemas(self) -> Mapping[str, TableSchema]:
        """The table schemas by name."""
        return self._schemas

    def schema(self, table: str) -> TableSchema:
        """Look up a table schema."""
        try:
            return self._schemas[table]
        except KeyError:
            raise UnknownTableError(f"Unknown table {table}.") from None

    def column_names(self) -> dict[str, tuple[str, ...]]:
        """The column names of every table."""
        return {name: schema.column_names for name, schema in self._schemas.items()}

    def check_query(self, query: Query) -> tuple[tuple[str, ColumnType], ...]:
        """Check every table and column a query reads, its subqueries included.

        Returns:
            The ``(name, type)`` pairs the outer query produces.

        Raises:
            UnknownTableError: The query reads an unknown table.
            UnknownColumnError: The query reads an unknown or qualified column.
            TypeMismatchError: ``sum`` or ``avg`` is applied to a non-numeric column.

        """
        schema = self.schema(query.table)
        columns = output_columns(query, [(c.name, c.type) for c in schema.columns])
        if query.where is not None:
            for column in iter_columns(query.where):
                if column.table is not None or column.name not in schema.column_names:
                    raise UnknownColumnError(f"Unknown column {column.name}.")
            for ref in iter_subqueries(query.where):
                self.check_query(ref.query)
        return columns

    def insert_rows(self, table: str, rows: Iterable[Sequence[Any]]) -> int:
        """Append rows to a table.

        Rows are validated in full before any of them is stored.

        Returns:
            The number of rows inserted.

        Raises:
            UnknownTableError: The table does not exist.
            TypeMismatchError: A row does not conform to the table schema.

        """
        schema = self.schema(table)
        width = len(schema.columns)
        conformed: list[Row] = []
        for row in rows:
            if len(row) != width:
                raise TypeMismatchError(
                    f"Table {table} has {width} columns; got a row with {len(row)} values."
                )
            conformed.append(
                tuple(conform_value(value, column) for value, column in zip(row, schema.columns))
            )
        self._store(table, conformed)
        logger.debug("Inserted %d rows into %s", len(conformed), table)
        return len(conformed)

    @abstractmethod
    def _store(self, table: str, rows: list[Row]) -> None:
        """Append validated rows."""

    @abstractmethod
    def rows(self, table: str) -> list[Row]:
        """All rows of a table."""

    @abstractmethod
    def execute_local(self, plan: Query) -> Recordset:
        """Evaluate a subquery-free plan over the local tables only."""

    def row_count(self) -> int:
        """The number of rows across all tables."""
        return sum(len(self.rows(table)) for table in self._schemas)


class MemoryCatalog(Catalog):
    """A catalog holding rows in Python lists, evaluated by :func:`evaluate`."""

    def __init__(self, schemas: Sequence[TableSchema]):
        """Create an empty in-memory catalog."""
        super().__init__(schemas)
        self._rows: dict[str, list[Row]] = {name: [] for name in self._schemas}

    def _store(self, table: str, rows: list[Row]) -> None:
        self._rows[table].extend(rows)

    def rows(self, table: str) -> list[Row]:
        """All rows of a table."""
        self.schema(table)
        return list(self._rows[table])

    def execute_local(self, plan: Query) -> Recordset:
        """Evaluate a subquery-free plan over the local tables only.

        Raises:
            UnknownTableError: The plan reads an unknown table.
            UnknownColumnError: The plan reads an unknown column.
            TypeMismatchError: The plan compares values of incompatible types.

        """
        schema = self.schema(plan.table)
        columns = tuple((column.name, column.type) for column in schema.columns)
        return evaluate(plan, columns, self._rows[plan.table])


_SQLITE_TYPES = {
    ColumnType.INTEGER: "INTEGER",
    ColumnType.REAL: "REAL",
    ColumnType.TEXT: "TEXT",
    ColumnType.TIMESTAMP: "TEXT",
}


class SqliteCatalog(Catalog):
    """A catalog backed by an in-memory SQLite database.

    Timestamps are stored as ISO-8601 text, which sorts chronologically.
    """

    def __init__(self, schemas: Sequence[TableSchema]):
        """Create an empty SQLite-backed catalog."""
        super().__init__(schemas)
        self._connection = sqlite3.connect(":memory:")
        for schema in self._schemas.values():
            columns = ", ".join(
                f'"{column.name}" {_SQLITE_TYPES[column.type]}' for column in schema.columns
            )
            self._connection.execute(f'CREATE TABLE "{schema.name}" ({columns})')

    def _store(self, table: str, rows: list[Row]) -> None:
        placeholders = ", ".join("?" for _ in self._schemas[table].columns)
        self._connection.executemany(
            f'INSERT INTO "{table}" VALUES ({placeholders})',
            [tuple(_to_sqlite(value) for value in row) for row in rows],
        )

    def rows(self, table: str) -> list[Row]:
        """All rows of a table."""
        schema = self.schema(table)
        cursor = self._connection.execute(f'SELECT * FROM "{table}"')
        kinds = [column.type for column in schema.columns]
        return [_from_sqlite(row, kinds) for row in cursor.fetchall()]

    def execute_local(self, plan: Query) -> Recordset:
        """Evaluate a plan with SQLite."""
        return self.execute_sql(render(plan))

    def execute_sql(self, sql: str) -> Recordset:
        """Run a query of the supported subset, nested ones included, with SQLite.

        Raises:
            UnknownTableError: The query reads an unknown table.
            UnknownColumnError: The query reads an unknown column.

        """
        query = self._normalize_timestamps(parse(sql))
        columns = self.check_query(query)
        try:
            cursor = self._connection.execute(render(query))
        except sqlite3.OperationalError as err:  # pragma: no cover
            raise StorageError(str(err)) from err
        kinds = [kind for _, kind in columns]
        return Recordset(columns, tuple(_from_sqlite(row, kinds) for row in cursor.fetchall()))

    def _normalize_timestamps(self, query: Query) -> Query:
        # Timestamps are stored as text, so literals compared with them must use the same format.
        schema = self.schema(query.table)
        timestamps = {c.name for c in schema.columns if c.type is ColumnType.TIMESTAMP}

        def literal(operand: Any) -> Any:
            if isinstance(operand, Literal) and isinstance(operand.value, str):
                return Literal(parse_timestamp(operand.value))
            return operand

        def is_timestamp(operand: Any) -> bool:
            if not isinstance(operand, ColumnRef) or operand.table is not None:
                return False
            return operand.name in timestamps

        def visit(predicate: Predicate) -> Predicate:
            if isinstance(predicate, (And, Or)):
                return type(predicate)(tuple(visit(child) for child in predicate.operands))
            if isinstance(predicate, Not):
                return Not(visit(predicate.operand))
            if isinstance(predicate, Comparison):
                left, right = predicate.left, predicate.right
                if isinstance(left, SubqueryRef):
                    left = SubqueryRef(left.index, self._normalize_timestamps(left.query))
                if isinstance(right, SubqueryRef):
                    right = SubqueryRef(right.index, self._normalize_timestamps(right.query))
                if is_timestamp(left):
                    right = literal(right)
                if is_timestamp(right):
                    left = literal(left)
                return Comparison(predicate.op, left, right)
            if isinstance(predicate, InList) and is_timestamp(predicate.operand):
                return InList(predicate.operand, tuple(literal(v) for v in predicate.values))
            if isinstance(predicate, InSubquery):
                ref = predicate.subquery
                return InSubquery(
                    predicate.operand,
                    SubqueryRef(ref.index, self._normalize_timestamps(ref.query)),
                )
            return predicate

        if query.where is None:
            return query
        return Query(query.projection, query.table, visit(query.where))

    def close(self) -> None:
        """Close the database connection."""
        self._connection.close()


def _to_sqlite(value: Scalar) -> Scalar:
    if isinstance(value, datetime.datetime):
        return value.isoformat(sep=" ")
    return value


def _from_sqlite(row: Sequence[Any], kinds: Sequence[ColumnType]) -> Row:
    values: list[Scalar] = []
    for value, kind in zip(row, kinds):
        if value is not None and kind is ColumnType.TIMESTAMP:
            value = parse_timestamp(value)
        elif value is not None and kind is ColumnType.REAL:
            value = float(value)
        values.append(value)
    return tuple(values)


_BACKENDS: dict[str, type[Catalog]] = {"memory": MemoryCatalog, "sqlite": SqliteCatalog}


def create_catalog(schemas: Sequence[TableSchema], backend: str = "memory") -> Catalog:
    """Create an empty catalog for the shared schema.

    Args:
        schemas: The table schemas
        backend: ``"memory"`` for the built-in evaluator or ``"sqlite"`` for an embedded
            SQLite database

    Returns:
        An empty catalog

    Raises:
        EmptyCatalogError: ``schemas`` is empty.
        DuplicateTableError: Two tables share a name.
        ValueError: The backend is unknown.

    """
    if backend not in _BACKENDS:
        raise ValueError(
            f"Unknown storage backend {backend!r}; expected one of {sorted(_BACKENDS)}."
        )
    return _BACKENDS[backend](schemas)


def insert_rows(catalog: Catalog, table: str, rows: Iterable[Sequence[Any]]) -> int:
    """Append rows to a table of a catalog. See :meth:`Catalog.insert_rows`."""
    return catalog.insert_rows(table, rows)


def execute_local(catalog: Catalog, plan: Query) -> Recordset:
    """Evaluate a plan over the local tables of a catalog. See :meth:`Catalog.execute_local`."""
    return catalog.execute_local(plan)


# ----------------------------------------------------------------------------------
# Schema and data files
# ----------------------------------------------------------------------------------


def schemas_from_dicts(tables: Iterable[Mapping[str, Any]]) -> list[TableSchema]:
    """Build table schemas from ``{"name", "columns": [{"name", "type", "nullable"}]}`` dicts."""
    schemas = []
    for table in tables:
        try:
            columns = tuple(
                Column(c["name"], ColumnType(c["type"]), bool(c.get("nullable", True)))
                for c in table["columns"]
            )
            schemas.append(TableSchema(table["name"], columns))
        except KeyError as err:
            raise ValueError(f"Table definitions need a {err.args[0]!r} entry.") from None
    return schemas


def schemas_to_dicts(schemas: Iterable[TableSchema]) -> list[dict[str, Any]]:
    """The inverse of :func:`schemas_from_dicts`."""
    return [
        {
            "name": schema.name,
            "columns": [
                {"name": c.name, "type": c.type.value, "nullable": c.nullable}
                for c in schema.columns
            ],
        }
        for schema in schemas
    ]


def load_schema(path: str | Path) -> list[TableSchema]:
    """Read table schemas from a TOML file with one ``[[tables]]`` entry per table."""
    document = toml.load(Path(path))
    return schemas_from_dicts(document.get("tables", []))


def dump_schema(schemas: Iterable[TableSchema], path: str | Path) -> None:
    """Write table schemas to a TOML file readable by :func:`load_schema`."""
    Path(path).write_text(toml.dumps({"tables": schemas_to_dicts(schemas)}))


def _parse_cell(text: str, column: Column) -> Scalar:
    if text == "":
        return None
    try:
        if column.type is ColumnType.INTEGER:
            return int(text)
        if column.type is ColumnType.REAL:
            return float(text)
    except ValueError:
        raise TypeMismatchError(
            f"{text!r} is not a valid {column.type.value} for column {column.name}."
        ) from None
    if column.type is ColumnType.TIMESTAMP:
        return parse_timestamp(text)
    return text


def read_csv(text: str, schema: TableSchema) -> list[Row]:
    """Parse CSV text with a header line into rows of a table.

    Header names select and order the columns; empty cells are ``NULL``.

    Raises:
        UnknownColumnError: A header names an unknown column.
        TypeMismatchError: A cell does not parse as its column type.

    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    header = [name.strip() for name in header]
    for name in header:
        schema.column(name)
    missing = [name for name in schema.column_names if name not in header]
    for name in missing:
        if not schema.column(name).nullable:
            raise TypeMismatchError(f"The CSV data lacks the non-nullable column {name}.")
    rows = []
    for record in reader:
        if not record:
            continue
        if len(record) != len(header):
            raise TypeMismatchError(
                f"Expected {len(header)} CSV fields per line; got {len(record)}."
            )
        cells = dict(zip(header, record))
        rows.append(
            tuple(
                _parse_cell(cells[column.name], column) if column.name in cells else None
                for column in schema.columns
            )
        )
    return rows


def write_csv(rows: Iterable[Row], schema: TableSchema) -> str:
    """Render table rows as CSV text readable by :func:`read_csv`."""
    columns = tuple((column.name, column.type) for column in schema.columns)
    return Recordset(columns, tuple(rows)).to_csv()
