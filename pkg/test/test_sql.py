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

"""Tests for the sql module."""

import datetime
import unittest

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from idss.sql import (
    AggregateCall,
    And,
    AvgReconstruction,
    ColumnRef,
    Comparison,
    CorrelatedSubqueryError,
    HeterogeneousSubqueriesError,
    InList,
    IsNull,
    Literal,
    MixedAggregateNestingError,
    Not,
    Or,
    PlanKindError,
    Query,
    QueryKind,
    QueryPlan,
    SqlSyntaxError,
    Star,
    TooDeepNestingError,
    UnsupportedFeatureError,
    bind_subqueries,
    classify,
    decompose_nested,
    distinct_values,
    parse,
    plan_query,
    render,
    render_literal,
    rewrite_avg,
)

_COLUMNS = ("host", "cpu", "mem", "disk_used")
_OPERATORS = ("=", "<>", "<", "<=", ">", ">=")

_literals = st.one_of(
    st.none(),
    st.integers(-(10**6), 10**6),
    st.integers(-(10**6), 10**6).map(lambda i: i / 4),
    st.text(alphabet="abcXYZ019 '_", max_size=8),
).map(Literal)
_columns = st.sampled_from(_COLUMNS).map(ColumnRef)
_atoms = st.one_of(
    st.builds(Comparison, st.sampled_from(_OPERATORS), _columns, _literals),
    st.builds(InList, _columns, st.lists(_literals, min_size=1, max_size=4).map(tuple)),
    st.builds(IsNull, _columns),
)


def _compound(children):
    return st.one_of(
        st.builds(Not, children),
        st.lists(children.filter(lambda p: not isinstance(p, And)), min_size=2, max_size=3).map(
            lambda operands: And(tuple(operands))
        ),
        st.lists(children.filter(lambda p: not isinstance(p, Or)), min_size=2, max_size=3).map(
            lambda operands: Or(tuple(operands))
        ),
    )


_predicates = st.recursive(_atoms, _compound, max_leaves=6)
_projections = st.one_of(
    st.just((Star(),)),
    st.lists(_columns, min_size=1, max_size=3).map(tuple),
    st.lists(
        st.builds(
            AggregateCall,
            st.sampled_from(("sum", "avg", "min", "max", "count")),
            st.sampled_from(_COLUMNS),
        ),
        min_size=1,
        max_size=3,
    ).map(tuple),
)
_queries = st.builds(Query, _projections, st.just("tb"), st.one_of(st.none(), _predicates))


class TestParse(unittest.TestCase):
    def test_parse(self):
        with self.subTest("Simple query"):
            query = parse("select host, cpu from tb_cpu where cpu > 50 and host = 'n1';")
            self.assertEqual((ColumnRef("host"), ColumnRef("cpu")), query.projection)
            self.assertEqual("tb_cpu", query.table)
            self.assertEqual(
                And(
                    (
                        Comparison(">", ColumnRef("cpu"), Literal(50)),
                        Comparison("=", ColumnRef("host"), Literal("n1")),
                    )
                ),
                query.where,
            )
            self.assertFalse(query.is_aggregate)
        with self.subTest("Aggregates"):
            query = parse("SELECT SUM(load), Avg(load), count(*) FROM tb_cpu_dynamic")
            self.assertEqual(
                (
                    AggregateCall("sum", "load"),
                    AggregateCall("avg", "load"),
                    AggregateCall("count", None),
                ),
                query.projection,
            )
            self.assertEqual(("sum", "avg", "count"), query.aggregate_functions)
            self.assertEqual("count(*)", query.projection[2].label)
        with self.subTest("Own table qualifier is dropped"):
            query = parse("SELECT tb.cpu FROM tb WHERE tb.cpu IS NULL")
            self.assertEqual((ColumnRef("cpu"),), query.projection)
            self.assertEqual(IsNull(ColumnRef("cpu")), query.where)
        with self.subTest("BETWEEN becomes a conjunction"):
            query = parse("SELECT * FROM tb WHERE cpu BETWEEN 1 AND 5 AND mem = 2")
            self.assertEqual(
                And(
                    (
                        Comparison(">=", ColumnRef("cpu"), Literal(1)),
                        Comparison("<=", ColumnRef("cpu"), Literal(5)),
                        Comparison("=", ColumnRef("mem"), Literal(2)),
                    )
                ),
                query.where,
            )
        with self.subTest("Negative and real literals"):
            query = parse("SELECT * FROM tb WHERE cpu > -2.5")
            self.assertEqual(Comparison(">", ColumnRef("cpu"), Literal(-2.5)), query.where)
        with self.subTest("IS NOT NULL and NOT IN"):
            query = parse("SELECT * FROM tb WHERE cpu IS NOT NULL OR mem NOT IN (1, 2)")
            self.assertEqual(
                Or(
                    (
                        Not(IsNull(ColumnRef("cpu"))),
                        Not(InList(ColumnRef("mem"), (Literal(1), Literal(2)))),
                    )
                ),
                query.where,
            )
        with self.subTest("Subqueries are numbered"):
            query = parse(
                "SELECT * FROM tb WHERE cpu > (SELECT avg(cpu) FROM tb) "
                "AND mem < (SELECT max(mem) FROM tb)"
            )
            self.assertEqual([0, 1], [ref.index for ref in query.subqueries])

    def test_parse_errors(self):
        with self.subTest("Empty query"):
            with pytest.raises(SqlSyntaxError) as e_info:
                parse("  ;")
            assert e_info.value.args[0] == "The query is empty."
        with self.subTest("Invalid SQL"):
            with pytest.raises(SqlSyntaxError) as e_info:
                parse("SELECT cpu FROM tb WHERE (cpu > 1")
            assert e_info.value.line >= 1
            assert e_info.value.col >= 1
        with self.subTest("Two statements"):
            with pytest.raises(SqlSyntaxError) as e_info:
                parse("SELECT cpu FROM tb; SELECT mem FROM tb")
            assert e_info.value.args[0] == "Exactly one statement must be submitted."
        with self.subTest("Writes"):
            with pytest.raises(UnsupportedFeatureError) as e_info:
                parse("INSERT INTO tb VALUES (1)")
            assert e_info.value.args[0] == "Only SELECT statements are distributed."
        with self.subTest("GROUP BY"):
            with pytest.raises(UnsupportedFeatureError) as e_info:
                parse("SELECT count(*) FROM tb GROUP BY host")
            assert e_info.value.args[0] == "GROUP BY is not supported."
        with self.subTest("ORDER BY"):
            with pytest.raises(UnsupportedFeatureError) as e_info:
                parse("SELECT cpu FROM tb ORDER BY cpu")
            assert e_info.value.args[0] == "ORDER BY is not supported."
        with self.subTest("Table alias"):
            with pytest.raises(UnsupportedFeatureError) as e_info:
                parse("SELECT cpu FROM tb AS t")
            assert e_info.value.args[0] == "Table aliases are not supported."
        with self.subTest("Column alias"):
            with pytest.raises(UnsupportedFeatureError) as e_info:
                parse("SELECT cpu AS c FROM tb")
            assert e_info.value.args[0] == "Column aliases are not supported."
        with self.subTest("Mixed projection"):
            with pytest.raises(UnsupportedFeatureError) as e_info:
                parse("SELECT host, max(cpu) FROM tb")
            assert e_info.value.args[0] == (
                "Mixing plain columns and aggregate functions requires GROUP BY, "
                "which is not supported."
            )
        with self.subTest("Unknown qualifier"):
            with pytest.raises(UnsupportedFeatureError) as e_info:
                parse("SELECT other.cpu FROM tb")
            assert e_info.value.args[0] == (
                "Column reference other.cpu names a table that is not in scope."
            )


class TestRender(unittest.TestCase):
    def test_render(self):
        with self.subTest("Canonical form"):
            query = parse("select  host ,cpu FROM tb where NOT cpu<=3 and (mem=1 or mem=2)")
            self.assertEqual(
                "SELECT host, cpu FROM tb WHERE NOT (cpu <= 3) AND (mem = 1 OR mem = 2)",
                render(query),
            )
            self.assertEqual(render(query), str(query))
        with self.subTest("Not-equal is rendered as <>"):
            query = parse("SELECT * FROM tb WHERE cpu != 1")
            self.assertEqual("SELECT * FROM tb WHERE cpu <> 1", render(query))
        with self.subTest("Subqueries"):
            sql = "SELECT host FROM tb WHERE cpu > (SELECT avg(cpu) FROM tb WHERE mem IS NULL)"
            self.assertEqual(sql, render(parse(sql)))

    def test_render_literal(self):
        with self.subTest("Scalars"):
            self.assertEqual("NULL", render_literal(None))
            self.assertEqual("-3", render_literal(-3))
            self.assertEqual("0.1", render_literal(0.1))
            self.assertEqual("'O''Brien'", render_literal("O'Brien"))
            self.assertEqual(
                "'2024-01-02 03:04:05'", render_literal(datetime.datetime(2024, 1, 2, 3, 4, 5))
            )
        with self.subTest("Non-finite reals"):
            with pytest.raises(UnsupportedFeatureError) as e_info:
                render_literal(float("inf"))
            assert e_info.value.args[0] == "The value inf has no SQL literal."
        with self.subTest("Booleans"):
            with pytest.raises(UnsupportedFeatureError) as e_info:
                render_literal(True)
            assert e_info.value.args[0] == "Boolean literals are not supported."

    @settings(max_examples=200, deadline=None)
    @given(_queries)
    def test_parse_render_identity(self, query):
        self.assertEqual(query, parse(render(query)))


class TestClassify(unittest.TestCase):
    def test_kinds(self):
        with self.subTest("Simple"):
            self.assertIs(QueryKind.SIMPLE, classify(parse("SELECT * FROM tb")).kind)
        with self.subTest("Aggregate"):
            self.assertIs(QueryKind.AGGREGATE, classify(parse("SELECT max(cpu) FROM tb")).kind)
        with self.subTest("Nested with plain subquery"):
            plan = classify(parse("SELECT host FROM tb WHERE mem IN (SELECT mem FROM tm)"))
            self.assertIs(QueryKind.NESTED, plan.kind)
            self.assertEqual([QueryKind.SIMPLE], [sub.kind for sub in plan.subplans])
            self.assertFalse(plan.subqueries_are_aggregate)
        with self.subTest("Nested with aggregate subqueries"):
            plan = classify(
                parse(
                    "SELECT host FROM tb WHERE cpu > (SELECT avg(cpu) FROM tb) "
                    "AND mem < (SELECT max(mem) FROM tm)"
                )
            )
            self.assertIs(QueryKind.NESTED, plan.kind)
            self.assertEqual(2, len(plan.subplans))
            self.assertTrue(plan.subqueries_are_aggregate)
        with self.subTest("Aggregate parent over a plain subquery"):
            plan = classify(parse("SELECT count(*) FROM tb WHERE mem IN (SELECT mem FROM tm)"))
            self.assertIs(QueryKind.NESTED, plan.kind)

    def test_classify_errors(self):
        with self.subTest("Three levels"):
            with pytest.raises(TooDeepNestingError) as e_info:
                classify(
                    parse(
                        "SELECT * FROM tb WHERE mem IN "
                        "(SELECT mem FROM tm WHERE disk IN (SELECT disk FROM td))"
                    )
                )
            assert e_info.value.args[0] == (
                "Nested queries are limited to two levels: a subquery may not contain subqueries."
            )
        with self.subTest("Aggregates on both levels"):
            with pytest.raises(MixedAggregateNestingError) as e_info:
                classify(parse("SELECT max(cpu) FROM tb WHERE cpu > (SELECT avg(cpu) FROM tb)"))
            assert e_info.value.args[0] == (
                "The parent query and its subqueries cannot both contain aggregate functions."
            )
        with self.subTest("Plain and aggregate subqueries"):
            with pytest.raises(HeterogeneousSubqueriesError) as e_info:
                classify(
                    parse(
                        "SELECT * FROM tb WHERE mem IN (SELECT mem FROM tm) "
                        "AND cpu > (SELECT avg(cpu) FROM tb)"
                    )
                )
            assert e_info.value.args[0] == (
                "All subqueries must be of the same kind: either plain fields or aggregate "
                "functions."
            )
        with self.subTest("Qualified outer column"):
            with pytest.raises(CorrelatedSubqueryError) as e_info:
                classify(
                    parse(
                        "SELECT * FROM tb WHERE mem IN "
                        "(SELECT mem FROM tm WHERE tm.host = tb.host)"
                    )
                )
            assert e_info.value.args[0] == (
                "The subquery references tb.host of its parent query; "
                "correlated subqueries are not supported."
            )
        with self.subTest("Unqualified outer column"):
            schemas = {"tb": ("host", "cpu", "mem"), "tm": ("mem",)}
            with pytest.raises(CorrelatedSubqueryError) as e_info:
                classify(
                    parse("SELECT * FROM tb WHERE mem IN (SELECT mem FROM tm WHERE cpu > 1)"),
                    schemas,
                )
            assert e_info.value.args[0] == (
                "The subquery column cpu only exists in the parent table tb; "
                "correlated subqueries are not supported."
            )
        with self.subTest("Two projected items"):
            with pytest.raises(UnsupportedFeatureError) as e_info:
                classify(parse("SELECT * FROM tb WHERE mem IN (SELECT mem, cpu FROM tm)"))
            assert e_info.value.args[0] == (
                "A subquery must select a single column or a single aggregate function."
            )
        with self.subTest("Plain subquery compared with ="):
            with pytest.raises(UnsupportedFeatureError) as e_info:
                classify(parse("SELECT * FROM tb WHERE mem = (SELECT mem FROM tm)"))
            assert e_info.value.args[0] == (
                "A plain-field subquery may only appear on the right-hand side of IN."
            )


class TestRewrite(unittest.TestCase):
    def test_rewrite_avg(self):
        with self.subTest("Average replaced in place"):
            rewritten, reconstruction = rewrite_avg(
                parse("SELECT avg(load), max(load) FROM tb_cpu_dynamic")
            )
            self.assertEqual(
                "SELECT sum(load), count(load), max(load) FROM tb_cpu_dynamic", render(rewritten)
            )
            self.assertEqual(((0, (0, 1)),), reconstruction.mapping)
            self.assertEqual([(0, 1), 2], reconstruction.source_positions())
        with self.subTest("No average"):
            query = parse("SELECT min(load) FROM tb_cpu_dynamic")
            rewritten, reconstruction = rewrite_avg(query)
            self.assertIs(query, rewritten)
            self.assertEqual((), reconstruction.mapping)
        with self.subTest("Invalid reconstruction"):
            with pytest.raises(ValueError) as e_info:
                AvgReconstruction(((0, (0, 0)),), 1)
            assert e_info.value.args[0] == "Sum/count position 0 is out of range or reused."

    def test_decompose_nested(self):
        with self.subTest("Aggregate subquery widens the skeleton"):
            plan = classify(
                parse("SELECT host FROM tb WHERE cpu > (SELECT avg(cpu) FROM tb) AND mem = 1")
            )
            skeleton, subplans = decompose_nested(plan)
            self.assertEqual("SELECT host, cpu, mem FROM tb WHERE mem = 1", render(skeleton))
            self.assertEqual("SELECT sum(cpu), count(cpu) FROM tb", render(subplans[0].parent))
            self.assertEqual("SELECT avg(cpu) FROM tb", render(subplans[0].source))
        with self.subTest("Star projection is not widened"):
            plan = classify(parse("SELECT * FROM tb WHERE cpu > (SELECT avg(cpu) FROM tb)"))
            skeleton, _ = decompose_nested(plan)
            self.assertEqual("SELECT * FROM tb", render(skeleton))
        with self.subTest("Plain subquery keeps the skeleton"):
            query = parse("SELECT host FROM tb WHERE mem IN (SELECT mem FROM tm)")
            skeleton, subplans = decompose_nested(classify(query))
            self.assertEqual(query, skeleton)
            self.assertEqual("SELECT mem FROM tm", render(subplans[0].parent))
        with self.subTest("Only nested plans"):
            with pytest.raises(PlanKindError) as e_info:
                decompose_nested(classify(parse("SELECT * FROM tb")))
            assert e_info.value.args[0] == (
                "Only nested plans can be decomposed, not simple plans."
            )
        with self.subTest("Plan shape"):
            with pytest.raises(PlanKindError) as e_info:
                QueryPlan(QueryKind.NESTED, parse("SELECT * FROM tb"))
            assert e_info.value.args[0] == "A plan is nested if and only if it has subplans."

    def test_plan_query(self):
        with self.subTest("Aggregate"):
            plan = plan_query(parse("SELECT avg(cpu) FROM tb"))
            self.assertEqual("SELECT sum(cpu), count(cpu) FROM tb", render(plan.parent))
            self.assertEqual("SELECT avg(cpu) FROM tb", render(plan.source))
        with self.subTest("Nested aggregate parent over a plain subquery"):
            plan = plan_query(parse("SELECT avg(cpu) FROM tb WHERE mem IN (SELECT mem FROM tm)"))
            self.assertFalse(plan.widened)
            self.assertEqual(((0, (0, 1)),), plan.reconstruction.mapping)
            self.assertEqual(
                "SELECT sum(cpu), count(cpu) FROM tb WHERE mem IN (SELECT mem FROM tm)",
                render(plan.parent),
            )
        with self.subTest("Nested widened"):
            plan = plan_query(parse("SELECT host FROM tb WHERE cpu > (SELECT avg(cpu) FROM tb)"))
            self.assertTrue(plan.widened)
            self.assertEqual("SELECT host, cpu FROM tb", render(plan.parent))


class TestBind(unittest.TestCase):
    def test_bind_subqueries(self):
        with self.subTest("IN list"):
            query = parse("SELECT host FROM tb WHERE mem IN (SELECT mem FROM tm)")
            self.assertEqual(
                "SELECT host FROM tb WHERE mem IN (1, 2)",
                render(bind_subqueries(query, {0: (1, 2)})),
            )
        with self.subTest("Empty IN list is always false"):
            query = parse("SELECT host FROM tb WHERE mem IN (SELECT mem FROM tm)")
            self.assertEqual(
                "SELECT host FROM tb WHERE 1 = 0", render(bind_subqueries(query, {0: ()}))
            )
        with self.subTest("Scalar"):
            query = parse("SELECT host FROM tb WHERE cpu > (SELECT avg(cpu) FROM tb)")
            self.assertEqual(
                "SELECT host FROM tb WHERE cpu > 2.5", render(bind_subqueries(query, {0: 2.5}))
            )
        with self.subTest("Missing value"):
            query = parse("SELECT host FROM tb WHERE cpu > (SELECT avg(cpu) FROM tb)")
            with pytest.raises(KeyError):
                bind_subqueries(query, {})

    def test_distinct_values(self):
        self.assertEqual((1, 3, None), distinct_values([3, None, 1, 3, None]))
        self.assertEqual((), distinct_values([]))
