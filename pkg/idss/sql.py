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
"""Parsing, classification and rewriting of the distributed SQL subset.

Queries are tokenized and parsed with `sqlglot <https://github.com/tobymao/sqlglot>`_ and then
lowered into the small immutable syntax tree defined here. Every query that reaches the overlay
is a single-table ``SELECT`` whose projection is either a list of columns or a list of aggregate
calls, and whose ``WHERE`` clause may hold at most one level of uncorrelated subqueries.
"""

from __future__ import annotations

import datetime
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Union

import sqlglot
from sqlglot import exp
from sqlglot.errors import ParseError, TokenError

Scalar = Union[int, float, str, datetime.datetime, None]

AGGREGATE_FUNCTIONS = ("sum", "avg", "min", "max", "count")

COMPARISON_OPERATORS = ("=", "<>", "<", "<=", ">", ">=")

_SQLGLOT_COMPARISONS: dict[type[exp.Expression], str] = {
    exp.EQ: "=",
    exp.NEQ: "<>",
    exp.LT: "<",
    exp.LTE: "<=",
    exp.GT: ">",
    exp.GTE: ">=",
}

_SQLGLOT_AGGREGATES: dict[type[exp.Expression], str] = {
    exp.Sum: "sum",
    exp.Avg: "avg",
    exp.Min: "min",
    exp.Max: "max",
    exp.Count: "count",
}

_CLAUSE_NAMES = {
    "joins": "JOIN",
    "group": "GROUP BY",
    "having": "HAVING",
    "order": "ORDER BY",
    "limit": "LIMIT",
    "offset": "OFFSET",
    "distinct": "DISTINCT",
    "with": "WITH",
    "with_": "WITH",
    "laterals": "LATERAL",
    "windows": "WINDOW",
}


class SqlError(ValueError):
    """Base class for errors raised while parsing or planning a query."""


class SqlSyntaxError(SqlError):
    """The query text is not valid SQL."""

    def __init__(self, message: str, line: int = 1, col: int = 1):
        """Create a syntax error located at ``line``/``col`` (both 1-based)."""
        super().__init__(message)
        self.line = line
        self.col = col


class UnsupportedFeatureError(SqlError):
    """The query is valid SQL but falls outside the distributed subset."""


class ClassificationError(SqlError):
    """Base class for queries that parse but cannot be planned for distribution."""


class TooDeepNestingError(ClassificationError):
    """A subquery contains another subquery."""


class MixedAggregateNestingError(ClassificationError):
    """Both the parent query and a subquery contain aggregate functions."""


class HeterogeneousSubqueriesError(ClassificationError):
    """Plain-field and aggregate subqueries appear in the same query."""


class CorrelatedSubqueryError(ClassificationError):
    """A subquery references a column of its parent query."""


class PlanKindError(SqlError):
    """An operation was applied to a plan of the wrong kind."""


# ----------------------------------------------------------------------------------
# Syntax tree
# ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnRef:
    """A reference to a column, optionally qualified with a table of an enclosing query."""

    name: str
    table: str | None = None


@dataclass(frozen=True)
class Literal:
    """A constant. ``None`` is SQL ``NULL``."""

    value: Scalar


@dataclass(frozen=True)
class Star:
    """The ``*`` projection."""


@dataclass(frozen=True)
class AggregateCall:
    """An aggregate function applied to a column, or to ``*`` when ``column`` is ``None``."""

    function: str
    column: str | None

    @property
    def label(self) -> str:
        """The output column name of this call."""
        return f"{self.function}({self.column or '*'})"


@dataclass(frozen=True)
class SubqueryRef:
    """A subquery embedded in a predicate, numbered in order of appearance."""

    index: int
    query: Query


@dataclass(frozen=True)
class Comparison:
    """A binary comparison ``left op right``."""

    op: str
    left: Operand
    right: Operand


@dataclass(frozen=True)
class InList:
    """``operand IN (v1, v2, ...)`` over literal values."""

    operand: Operand
    values: tuple[Literal, ...]


@dataclass(frozen=True)
class InSubquery:
    """``operand IN (SELECT ...)``."""

    operand: Operand
    subquery: SubqueryRef


@dataclass(frozen=True)
class IsNull:
    """``operand IS NULL``."""

    operand: Operand


@dataclass(frozen=True)
class And:
    """Conjunction of two or more predicates."""

    operands: tuple[Predicate, ...]


@dataclass(frozen=True)
class Or:
    """Disjunction of two or more predicates."""

    operands: tuple[Predicate, ...]


@dataclass(frozen=True)
class Not:
    """Negation of a predicate."""

    operand: Predicate


Operand = Union[ColumnRef, Literal, SubqueryRef]
Predicate = Union[Comparison, InList, InSubquery, IsNull, And, Or, Not]
ProjectionItem = Union[Star, ColumnRef, AggregateCall]


@dataclass(frozen=True)
class Query:
    """A single-table ``SELECT`` statement."""

    projection: tuple[ProjectionItem, ...]
    table: str
    where: Predicate | None = None

    @property
    def is_aggregate(self) -> bool:
        """Whether the projection holds aggregate calls."""
        return any(isinstance(item, AggregateCall) for item in self.projection)

    @property
    def aggregate_functions(self) -> tuple[str, ...]:
        """The aggregate function names of the projection, in order."""
        return tuple(item.function for item in self.projection if isinstance(item, AggregateCall))

    @property
    def subqueries(self) -> tuple[SubqueryRef, ...]:
        """The subqueries directly embedded in the ``WHERE`` clause, ordered by index."""
        if self.where is None:
            return ()
        refs = {ref.index: ref for ref in iter_subqueries(self.where)}
        return tuple(refs[i] for i in sorted(refs))

    def __str__(self) -> str:
        return render(self)


# A plan that a peer can run as-is: a ``Query`` without subquery references.
ExecutablePlan = Query


class QueryKind(str, Enum):
    """The three kinds of distributed queries."""

    SIMPLE = "simple"
    AGGREGATE = "aggregate"
    NESTED = "nested"


@dataclass(frozen=True)
class AvgReconstruction:
    """How to rebuild ``avg`` columns from the ``sum``/``count`` pairs that replaced them.

    ``mapping`` pairs the output position of every original ``avg`` column with the positions
    of its ``sum`` and ``count`` columns in the rewritten projection. ``width`` is the length of
    the original projection.
    """

    mapping: tuple[tuple[int, tuple[int, int]], ...] = ()
    width: int = 0

    def __post_init__(self):
        """Validate the mapping."""
        used: set[int] = set()
        rewritten_width = self.width + len(self.mapping)
        for position, (sum_pos, count_pos) in self.mapping:
            if not 0 <= position < self.width:
                raise ValueError(f"Average position {position} is out of range.")
            for pos in (sum_pos, count_pos):
                if not 0 <= pos < rewritten_width or pos in used:
                    raise ValueError(f"Sum/count position {pos} is out of range or reused.")
                used.add(pos)

    def source_positions(self) -> list[int | tuple[int, int]]:
        """For each original position, the rewritten position or the ``(sum, count)`` pair."""
        pairs = dict(self.mapping)
        positions: list[int | tuple[int, int]] = []
        shift = 0
        for position in range(self.width):
            if position in pairs:
                positions.append(pairs[position])
                shift += 1
            else:
                positions.append(position + shift)
        return positions


@dataclass(frozen=True)
class QueryPlan:
    """The classified, rewritten form of a submitted query.

    For ``SIMPLE`` and ``AGGREGATE`` plans ``parent`` is the executable query broadcast to the
    overlay. For ``NESTED`` plans ``parent`` is the skeleton of the parent query and
    ``subplans`` hold one plan per subquery; ``widened`` tells whether the skeleton dropped the
    subquery conjuncts and must be re-filtered on the initiator.
    """

    kind: QueryKind
    parent: Query
    subplans: tuple[QueryPlan, ...] = ()
    reconstruction: AvgReconstruction = field(default_factory=AvgReconstruction)
    original: Query | None = None
    widened: bool = False

    def __post_init__(self):
        """Check the kind against the plan shape."""
        if (self.kind is QueryKind.NESTED) != bool(self.subplans):
            raise PlanKindError("A plan is nested if and only if it has subplans.")

    @property
    def source(self) -> Query:
        """The query as the user wrote it."""
        return self.original if self.original is not None else self.parent

    @property
    def subqueries_are_aggregate(self) -> bool:
        """Whether the subplans compute aggregates."""
        return any(sub.kind is QueryKind.AGGREGATE for sub in self.subplans)


# ----------------------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------------------


def parse(sql: str) -> Query:
    """Parse a query of the supported subset.

    Args:
        sql: The query text. Keywords are case-insensitive and a trailing ``;`` is allowed.

    Returns:
        The syntax tree of the query.

    Raises:
        SqlSyntaxError: The text is not valid SQL.
        UnsupportedFeatureError: The query uses a construct outside the supported subset.

    """
    text = sql.strip()
    while text.endswith(";"):
        text = text[:-1].rstrip()
    if not text:
        raise SqlSyntaxError("The query is empty.")
    try:
        statements = sqlglot.parse(text)
    except ParseError as err:
        details = err.errors[0] if err.errors else {}
        raise SqlSyntaxError(
            details.get("description") or str(err),
            line=details.get("line") or 1,
            col=details.get("col") or 1,
        ) from err
    except TokenError as err:
        raise SqlSyntaxError(str(err)) from err
    statements = [statement for statement in statements if statement is not None]
    if len(statements) != 1:
        raise SqlSyntaxError("Exactly one statement must be submitted.")
    statement = statements[0]
    if not isinstance(statement, exp.Select):
        if isinstance(statement, (exp.Insert, exp.Update, exp.Delete, exp.Create, exp.Drop)):
            raise UnsupportedFeatureError("Only SELECT statements are distributed.")
        if isinstance(statement, exp.Union):
            raise UnsupportedFeatureError("Set operations are not supported.")
        raise SqlSyntaxError("Expected a SELECT statement.")
    return _lower_select(statement, outer_tables=())


def _lower_select(select: exp.Select, outer_tables: tuple[str, ...]) -> Query:
    for key, value in select.args.items():
        if key in ("expressions", "from", "from_", "where") or not value:
            continue
        raise UnsupportedFeatureError(f"{_CLAUSE_NAMES.get(key, key.upper())} is not supported.")

    from_clause = select.args.get("from_") or select.args.get("from")
    if from_clause is None:
        raise SqlSyntaxError("A FROM clause naming one table is required.")
    source = from_clause.this
    if not isinstance(source, exp.Table):
        raise UnsupportedFeatureError("Only a single table may appear in FROM.")
    if source.alias:
        raise UnsupportedFeatureError("Table aliases are not supported.")
    if source.args.get("db") or source.args.get("catalog"):
        raise UnsupportedFeatureError("Qualified table names are not supported.")
    table = source.name

    scope = _Scope(table=table, outer_tables=outer_tables)
    projection = tuple(_lower_projection_item(item, scope) for item in select.expressions)
    if not projection:
        raise SqlSyntaxError("The projection list is empty.")
    has_aggregates = any(isinstance(item, AggregateCall) for item in projection)
    if has_aggregates and not all(isinstance(item, AggregateCall) for item in projection):
        raise UnsupportedFeatureError(
            "Mixing plain columns and aggregate functions requires GROUP BY, "
            "which is not supported."
        )

    where_clause = select.args.get("where")
    where = _lower_predicate(where_clause.this, scope) if where_clause is not None else None
    return Query(projection=projection, table=table, where=where)


@dataclass
class _Scope:
    table: str
    outer_tables: tuple[str, ...]
    next_subquery: int = 0


def _lower_column(node: exp.Column, scope: _Scope) -> ColumnRef:
    if isinstance(node.this, exp.Star):
        raise UnsupportedFeatureError("Qualified stars are not supported.")
    qualifier = node.table
    if not qualifier or qualifier == scope.table:
        return ColumnRef(node.name)
    if qualifier in scope.outer_tables:
        return ColumnRef(node.name, table=qualifier)
    raise UnsupportedFeatureError(
        f"Column reference {qualifier}.{node.name} names a table that is not in scope."
    )


def _lower_projection_item(node: exp.Expression, scope: _Scope) -> ProjectionItem:
    if isinstance(node, exp.Star):
        return Star()
    if isinstance(node, exp.Column):
        return _lower_column(node, scope)
    if isinstance(node, exp.Alias):
        raise UnsupportedFeatureError("Column aliases are not supported.")
    function = _SQLGLOT_AGGREGATES.get(type(node))
    if function is None:
        raise UnsupportedFeatureError(f"Unsupported projection item: {node.sql()}.")
    argument = node.this
    if isinstance(argument, exp.Star) and function == "count":
        return AggregateCall(function, None)
    if isinstance(argument, exp.Column):
        column = _lower_column(argument, scope)
        if column.table is not None:
            raise UnsupportedFeatureError("Aggregates over outer columns are not supported.")
        return AggregateCall(function, column.name)
    if isinstance(argument, exp.Distinct):
        raise UnsupportedFeatureError("DISTINCT inside aggregate functions is not supported.")
    raise UnsupportedFeatureError(f"Aggregate functions take a single column: {node.sql()}.")


def conjunction(predicates: Iterable[Predicate]) -> Predicate:
    """Join predicates with ``AND``, flattening nested conjunctions."""
    operands: list[Predicate] = []
    for predicate in predicates:
        operands.extend(predicate.operands if isinstance(predicate, And) else (predicate,))
    return operands[0] if len(operands) == 1 else And(tuple(operands))


def disjunction(predicates: Iterable[Predicate]) -> Predicate:
    """Join predicates with ``OR``, flattening nested disjunctions."""
    operands: list[Predicate] = []
    for predicate in predicates:
        operands.extend(predicate.operands if isinstance(predicate, Or) else (predicate,))
    return operands[0] if len(operands) == 1 else Or(tuple(operands))


def _flatten(node: exp.Expression, kind: type[exp.Expression]) -> Iterator[exp.Expression]:
    while isinstance(node, exp.Paren):
        node = node.this
    if isinstance(node, kind):
        yield from _flatten(node.left, kind)
        yield from _flatten(node.right, kind)
    else:
        yield node


def _lower_predicate(node: exp.Expression, scope: _Scope) -> Predicate:
    if isinstance(node, exp.Paren):
        return _lower_predicate(node.this, scope)
    if isinstance(node, exp.And):
        return conjunction(_lower_predicate(child, scope) for child in _flatten(node, exp.And))
    if isinstance(node, exp.Or):
        return disjunction(_lower_predicate(child, scope) for child in _flatten(node, exp.Or))
    if isinstance(node, exp.Not):
        return Not(_lower_predicate(node.this, scope))
    op = _SQLGLOT_COMPARISONS.get(type(node))
    if op is not None:
        return Comparison(op, _lower_operand(node.left, scope), _lower_operand(node.right, scope))
    if isinstance(node, exp.In):
        if node.args.get("unnest") or node.args.get("field"):
            raise UnsupportedFeatureError(f"Unsupported IN form: {node.sql()}.")
        operand = _lower_operand(node.this, scope)
        query = node.args.get("query")
        if query is not None:
            return InSubquery(operand, _lower_subquery(query, scope))
        values = []
        for value in node.expressions:
            lowered = _lower_operand(value, scope)
            if not isinstance(lowered, Literal):
                raise UnsupportedFeatureError("IN lists may only hold literals or one subquery.")
            values.append(lowered)
        return InList(operand, tuple(values))
    if isinstance(node, exp.Is):
        if isinstance(node.expression, exp.Null):
            return IsNull(_lower_operand(node.this, scope))
        raise UnsupportedFeatureError(f"Unsupported IS test: {node.sql()}.")
    if isinstance(node, exp.Between):
        operand = _lower_operand(node.this, scope)
        return And(
            (
                Comparison(">=", operand, _lower_operand(node.args["low"], scope)),
                Comparison("<=", operand, _lower_operand(node.args["high"], scope)),
            )
        )
    raise UnsupportedFeatureError(f"Unsupported condition: {node.sql()}.")


def _lower_subquery(node: exp.Expression, scope: _Scope) -> SubqueryRef:
    if isinstance(node, exp.Subquery):
        node = node.this
    while isinstance(node, exp.Paren):
        node = node.this
    if not isinstance(node, exp.Select):
        raise UnsupportedFeatureError("Subqueries must be plain SELECT statements.")
    query = _lower_select(node, outer_tables=(*scope.outer_tables, scope.table))
    ref = SubqueryRef(scope.next_subquery, query)
    scope.next_subquery += 1
    return ref


def _lower_operand(node: exp.Expression, scope: _Scope) -> Operand:
    if isinstance(node, exp.Subquery):
        return _lower_subquery(node, scope)
    if isinstance(node, exp.Paren):
        return _lower_operand(node.this, scope)
    if isinstance(node, exp.Column):
        return _lower_column(node, scope)
    if isinstance(node, exp.Null):
        return Literal(None)
    if isinstance(node, exp.Neg):
        inner = _lower_operand(node.this, scope)
        if isinstance(inner, Literal) and isinstance(inner.value, (int, float)):
            return Literal(-inner.value)
        raise UnsupportedFeatureError(f"Unsupported negation: {node.sql()}.")
    if isinstance(node, exp.Literal):
        if node.is_string:
            return Literal(node.this)
        return Literal(_parse_number(node.this))
    raise UnsupportedFeatureError(f"Unsupported operand: {node.sql()}.")


def _parse_number(text: str) -> int | float:
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise SqlSyntaxError(f"Invalid numeric literal: {text}.") from None


# ----------------------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------------------


def render(query: Query) -> str:
    """Render a query as canonical SQL.

    Keywords are upper case, function names lower case, items separated by ``", "`` and all other
    tokens by single spaces. The output parses back to an identical tree.
    """
    items = ", ".join(_render_projection_item(item) for item in query.projection)
    text = f"SELECT {items} FROM {query.table}"
    if query.where is not None:
        text += f" WHERE {_render_predicate(query.where)}"
    return text


def _render_projection_item(item: ProjectionItem) -> str:
    if isinstance(item, Star):
        return "*"
    if isinstance(item, AggregateCall):
        return item.label
    return _render_operand(item)


def render_literal(value: Scalar) -> str:
    """Render a constant as a SQL literal."""
    if value is None:
        return "NULL"
    if isinstance(value, bool):
        raise UnsupportedFeatureError("Boolean literals are not supported.")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise UnsupportedFeatureError(f"The value {value} has no SQL literal.")
        return repr(value)
    if isinstance(value, datetime.datetime):
        value = value.isoformat(sep=" ")
    escaped = value.replace("'", "''")
    return f"'{escaped}'"


def _render_operand(operand: Operand) -> str:
    if isinstance(operand, Literal):
        return render_literal(operand.value)
    if isinstance(operand, SubqueryRef):
        return f"({render(operand.query)})"
    if operand.table is not None:
        return f"{operand.table}.{operand.name}"
    return operand.name


def _render_predicate(predicate: Predicate) -> str:
    if isinstance(predicate, Comparison):
        left = _render_operand(predicate.left)
        return f"{left} {predicate.op} {_render_operand(predicate.right)}"
    if isinstance(predicate, InList):
        values = ", ".join(_render_operand(value) for value in predicate.values)
        return f"{_render_operand(predicate.operand)} IN ({values})"
    if isinstance(predicate, InSubquery):
        return f"{_render_operand(predicate.operand)} IN ({render(predicate.subquery.query)})"
    if isinstance(predicate, IsNull):
        return f"{_render_operand(predicate.operand)} IS NULL"
    if isinstance(predicate, Not):
        return f"NOT ({_render_predicate(predicate.operand)})"
    if isinstance(predicate, And):
        return " AND ".join(
            f"({_render_predicate(child)})" if isinstance(child, Or) else _render_predicate(child)
            for child in predicate.operands
        )
    return " OR ".join(_render_predicate(child) for child in predicate.operands)


# ----------------------------------------------------------------------------------
# Tree helpers
# ----------------------------------------------------------------------------------


def iter_subqueries(predicate: Predicate) -> Iterator[SubqueryRef]:
    """Yield the subquery references of a predicate, without descending into them."""
    if isinstance(predicate, (And, Or)):
        for child in predicate.operands:
            yield from iter_subqueries(child)
    elif isinstance(predicate, Not):
        yield from iter_subqueries(predicate.operand)
    elif isinstance(predicate, InSubquery):
        yield predicate.subquery
        if isinstance(predicate.operand, SubqueryRef):
            yield predicate.operand
    elif isinstance(predicate, Comparison):
        for operand in (predicate.left, predicate.right):
            if isinstance(operand, SubqueryRef):
                yield operand
    elif isinstance(predicate, (InList, IsNull)) and isinstance(predicate.operand, SubqueryRef):
        yield predicate.operand


def iter_columns(predicate: Predicate) -> Iterator[ColumnRef]:
    """Yield the column references of a predicate, without descending into subqueries."""
    if isinstance(predicate, (And, Or)):
        for child in predicate.operands:
            yield from iter_columns(child)
    elif isinstance(predicate, Not):
        yield from iter_columns(predicate.operand)
    elif isinstance(predicate, Comparison):
        operands: tuple[Operand, ...] = (predicate.left, predicate.right)
        yield from (operand for operand in operands if isinstance(operand, ColumnRef))
    elif isinstance(predicate.operand, ColumnRef):
        yield predicate.operand


def referenced_columns(query: Query) -> list[str]:
    """The distinct column names a query reads, in order of first appearance."""
    names: list[str] = []
    for item in query.projection:
        if isinstance(item, ColumnRef):
            names.append(item.name)
        elif isinstance(item, AggregateCall) and item.column is not None:
            names.append(item.column)
    if query.where is not None:
        names.extend(column.name for column in iter_columns(query.where))
    return list(dict.fromkeys(names))


def _contains_subquery(predicate: Predicate) -> bool:
    return next(iter_subqueries(predicate), None) is not None


# ----------------------------------------------------------------------------------
# Classification and rewriting
# ----------------------------------------------------------------------------------


def classify(ast: Query, schemas: Mapping[str, Sequence[str]] | None = None) -> QueryPlan:
    """Assign a query to one of the three distributed query kinds.

    The returned plan carries the query unchanged; see :func:`plan_query` for the rewritten form.

    Args:
        ast: A parsed query
        schemas: Optional column names per table. When given, an unqualified subquery column
            that only exists in the parent table is reported as a correlation.

    Returns:
        A plan whose ``kind`` is set and, for nested queries, whose ``subplans`` hold the
        subqueries as written.

    Raises:
        TooDeepNestingError: A subquery contains a subquery.
        MixedAggregateNestingError: Parent and subqueries both aggregate.
        HeterogeneousSubqueriesError: Plain-field and aggregate subqueries are mixed.
        CorrelatedSubqueryError: A subquery references its parent.
        UnsupportedFeatureError: A subquery does not project exactly one item, or a plain-field
            subquery is used outside of ``IN``.

    """
    refs = ast.subqueries
    if not refs:
        kind = QueryKind.AGGREGATE if ast.is_aggregate else QueryKind.SIMPLE
        return QueryPlan(kind=kind, parent=ast)

    for ref in refs:
        if ref.query.subqueries:
            raise TooDeepNestingError(
                "Nested queries are limited to two levels: a subquery may not contain subqueries."
            )
    for ref in refs:
        _check_uncorrelated(ast, ref.query, schemas)
        projection = ref.query.projection
        if len(projection) != 1 or isinstance(projection[0], Star):
            raise UnsupportedFeatureError(
                "A subquery must select a single column or a single aggregate function."
            )

    aggregate_flags = {ref.query.is_aggregate for ref in refs}
    if len(aggregate_flags) > 1:
        raise HeterogeneousSubqueriesError(
            "All subqueries must be of the same kind: either plain fields or aggregate functions."
        )
    if ast.is_aggregate and True in aggregate_flags:
        raise MixedAggregateNestingError(
            "The parent query and its subqueries cannot both contain aggregate functions."
        )
    if False in aggregate_flags:
        assert ast.where is not None
        _check_plain_subqueries_in_membership_tests(ast.where)

    subplans = tuple(
        QueryPlan(
            kind=QueryKind.AGGREGATE if ref.query.is_aggregate else QueryKind.SIMPLE,
            parent=ref.query,
        )
        for ref in refs
    )
    return QueryPlan(kind=QueryKind.NESTED, parent=ast, subplans=subplans)


def _check_uncorrelated(
    parent: Query, sub: Query, schemas: Mapping[str, Sequence[str]] | None
) -> None:
    columns = [item for item in sub.projection if isinstance(item, ColumnRef)]
    if sub.where is not None:
        columns.extend(iter_columns(sub.where))
    for column in columns:
        if column.table is not None:
            raise CorrelatedSubqueryError(
                f"The subquery references {column.table}.{column.name} of its parent query; "
                "correlated subqueries are not supported."
            )
    if schemas is None or sub.table not in schemas or parent.table not in schemas:
        return
    own = set(schemas[sub.table])
    outer = set(schemas[parent.table])
    for name in referenced_columns(sub):
        if name not in own and name in outer:
            raise CorrelatedSubqueryError(
                f"The subquery column {name} only exists in the parent table {parent.table}; "
                "correlated subqueries are not supported."
            )


def _check_plain_subqueries_in_membership_tests(predicate: Predicate) -> None:
    if isinstance(predicate, (And, Or)):
        for child in predicate.operands:
            _check_plain_subqueries_in_membership_tests(child)
    elif isinstance(predicate, Not):
        _check_plain_subqueries_in_membership_tests(predicate.operand)
    elif not isinstance(predicate, InSubquery) or isinstance(predicate.operand, SubqueryRef):
        if any(True for _ in iter_subqueries(predicate)):
            raise UnsupportedFeatureError(
                "A plain-field subquery may only appear on the right-hand side of IN."
            )


def rewrite_avg(ast: Query) -> tuple[Query, AvgReconstruction]:
    """Replace every ``avg(col)`` of the projection with the pair ``sum(col), count(col)``.

    Args:
        ast: A parsed query

    Returns:
        - The rewritten query. Non-``avg`` items keep their relative order; each pair takes the
          place of the ``avg`` it replaces.
        - The mapping needed to rebuild the averages from the rewritten output.

    """
    items: list[ProjectionItem] = []
    mapping: list[tuple[int, tuple[int, int]]] = []
    for position, item in enumerate(ast.projection):
        if isinstance(item, AggregateCall) and item.function == "avg":
            mapping.append((position, (len(items), len(items) + 1)))
            items.append(AggregateCall("sum", item.column))
            items.append(AggregateCall("count", item.column))
        else:
            items.append(item)
    reconstruction = AvgReconstruction(tuple(mapping), len(ast.projection))
    if not mapping:
        return ast, reconstruction
    return replace(ast, projection=tuple(items)), reconstruction


def _rewritten_subplan(sub: QueryPlan) -> QueryPlan:
    if sub.kind is QueryKind.AGGREGATE:
        rewritten, reconstruction = rewrite_avg(sub.parent)
        return QueryPlan(
            kind=QueryKind.AGGREGATE,
            parent=rewritten,
            reconstruction=reconstruction,
            original=sub.parent,
        )
    return sub


def decompose_nested(plan: QueryPlan) -> tuple[Query, tuple[QueryPlan, ...]]:
    """Split a nested plan into a parent skeleton and independently broadcastable subplans.

    Aggregate subqueries are rewritten for distribution (``avg`` becomes ``sum``, ``count``).
    When the subqueries aggregate, the skeleton drops every top-level conjunct that holds a
    subquery and widens its projection with the columns the original predicate reads, so that
    the initiator can re-filter. Plain-field subqueries leave the skeleton untouched: their
    ``IN`` holes are bound with literal lists once the subquery results are known.

    Args:
        plan: A plan of kind ``NESTED``

    Returns:
        - The parent skeleton
        - One plan per subquery, in subquery order

    Raises:
        PlanKindError: The plan is not nested.

    """
    if plan.kind is not QueryKind.NESTED:
        raise PlanKindError(f"Only nested plans can be decomposed, not {plan.kind.value} plans.")
    source = plan.source
    subplans = tuple(_rewritten_subplan(sub) for sub in plan.subplans)
    if not plan.subqueries_are_aggregate:
        return source, subplans

    assert source.where is not None
    conjuncts = source.where.operands if isinstance(source.where, And) else (source.where,)
    kept = tuple(conjunct for conjunct in conjuncts if not _contains_subquery(conjunct))
    where: Predicate | None
    if not kept:
        where = None
    elif len(kept) == 1:
        where = kept[0]
    else:
        where = And(kept)

    projection = source.projection
    if not any(isinstance(item, Star) for item in projection):
        projected = {item.name for item in projection if isinstance(item, ColumnRef)}
        extra = [
            ColumnRef(column.name)
            for column in iter_columns(source.where)
            if column.name not in projected
        ]
        projection = projection + tuple(dict.fromkeys(extra))
    return Query(projection=projection, table=source.table, where=where), subplans


def plan_query(ast: Query, schemas: Mapping[str, Sequence[str]] | None = None) -> QueryPlan:
    """Classify a query and apply the rewrites needed to distribute it.

    Args:
        ast: A parsed query
        schemas: Optional column names per table, see :func:`classify`

    Returns:
        The distributable plan. ``original`` holds ``ast``.

    """
    plan = classify(ast, schemas)
    if plan.kind is QueryKind.SIMPLE:
        return replace(plan, original=ast)
    if plan.kind is QueryKind.AGGREGATE:
        rewritten, reconstruction = rewrite_avg(ast)
        return replace(plan, parent=rewritten, reconstruction=reconstruction, original=ast)
    skeleton, subplans = decompose_nested(plan)
    skeleton, reconstruction = rewrite_avg(skeleton)
    return QueryPlan(
        kind=QueryKind.NESTED,
        parent=skeleton,
        subplans=subplans,
        reconstruction=reconstruction,
        original=ast,
        widened=plan.subqueries_are_aggregate,
    )


# ----------------------------------------------------------------------------------
# Binding subquery results
# ----------------------------------------------------------------------------------

# A scalar for aggregate subqueries, a tuple of distinct values for plain-field subqueries.
BoundValue = Union[Scalar, tuple[Scalar, ...]]

_ALWAYS_FALSE = Comparison("=", Literal(1), Literal(0))


def distinct_values(values: Sequence[Scalar]) -> tuple[Scalar, ...]:
    """Deduplicate subquery values into a deterministic order, ``NULL`` last."""
    present = sorted({value for value in values if value is not None})  # type: ignore[type-var]
    if any(value is None for value in values):
        return (*present, None)
    return tuple(present)


def bind_subqueries(query: Query, values: Mapping[int, BoundValue]) -> Query:
    """Replace the subquery holes of a query with their computed results.

    Args:
        query: A query whose ``WHERE`` clause holds subquery references
        values: The result of every subquery, keyed by subquery index. Tuples bind as ``IN``
            lists, other values as scalars.

    Returns:
        A query without subquery references.

    Raises:
        KeyError: A subquery has no bound value.

    """
    if query.where is None:
        return query
    return replace(query, where=_bind_predicate(query.where, values))


def _bind_operand(operand: Operand, values: Mapping[int, BoundValue]) -> Operand:
    if not isinstance(operand, SubqueryRef):
        return operand
    value = values[operand.index]
    if isinstance(value, tuple):
        value = value[0] if value else None
    return Literal(value)


def _bind_predicate(predicate: Predicate, values: Mapping[int, BoundValue]) -> Predicate:
    if isinstance(predicate, And):
        return And(tuple(_bind_predicate(child, values) for child in predicate.operands))
    if isinstance(predicate, Or):
        return Or(tuple(_bind_predicate(child, values) for child in predicate.operands))
    if isinstance(predicate, Not):
        return Not(_bind_predicate(predicate.operand, values))
    if isinstance(predicate, Comparison):
        return Comparison(
            predicate.op,
            _bind_operand(predicate.left, values),
            _bind_operand(predicate.right, values),
        )
    if isinstance(predicate, InSubquery):
        value = values[predicate.subquery.index]
        members = value if isinstance(value, tuple) else (value,)
        if not members:
            return _ALWAYS_FALSE
        return InList(
            _bind_operand(predicate.operand, values), tuple(Literal(v) for v in members)
        )
    if isinstance(predicate, InList):
        return InList(_bind_operand(predicate.operand, values), predicate.values)
    return IsNull(_bind_operand(predicate.operand, values))
