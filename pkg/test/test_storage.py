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

"""Tests for the storage module."""

import datetime
import math
import tempfile
import unittest
from pathlib import Path

import pytest
from idss.datasets import generate_rows_uniform
from idss.sql import parse
from idss.storage import (
    Column,
    ColumnType,
    DuplicateColumnError,
    DuplicateTableError,
    EmptyCatalogError,
    MemoryCatalog,
    Recordset,
    SqliteCatalog,
    TableSchema,
    TypeMismatchError,
    UnknownColumnError,
    UnknownTableError,
    compile_predicate,
    create_catalog,
    dump_schema,
    execute_local,
    insert_rows,
    load_schema,
    read_csv,
    write_csv,
)

CPU = TableSchema(
    "tb_cpu_dynamic",
    (
        Column("host", ColumnType.TEXT, nullable=False),
        Column("load", ColumnType.REAL),
        Column("cores", ColumnType.INTEGER),
        Column("ts", ColumnType.TIMESTAMP),
    ),
)

ROWS = [
    ("n1", 0.5, 4, datetime.datetime(2024, 1, 1, 10)),
    ("n2", 1.5, 8, datetime.datetime(2024, 1, 2, 10)),
    ("n3", None, 8, datetime.datetime(2024, 1, 3, 10)),
    ("n4", 3.0, None, None),
]


def _rows_close(a, b):
    if a.column_names != b.column_names or len(a) != len(b):
        return False
    key = lambda row: tuple((v is not None, v if v is not None else 0) for v in row)  # noqa: E731
    for row_a, row_b in zip(sorted(a.rows, key=key), sorted(b.rows, key=key)):
        for x, y in zip(row_a, row_b):
            if isinstance(x, float) and isinstance(y, float):
                if not math.isclose(x, y, rel_tol=1e-9):
                    return False
            elif x != y:
                return False
    return True


class TestSchema(unittest.TestCase):
    def test_schema(self):
        with self.subTest("Lookup"):
            self.assertEqual(("host", "load", "cores", "ts"), CPU.column_names)
            self.assertEqual(2, CPU.index_of("cores"))
            self.assertIs(ColumnType.REAL, CPU.column("load").type)
        with self.subTest("Unknown column"):
            with pytest.raises(UnknownColumnError) as e_info:
                CPU.column("nope")
            assert e_info.value.args[0] == "Table tb_cpu_dynamic has no column nope."
        with self.subTest("Duplicate column"):
            with pytest.raises(DuplicateColumnError) as e_info:
                TableSchema("t", (Column("a", "integer"), Column("a", "text")))
            assert e_info.value.args[0] == "Column a appears more than once in table t."
        with self.subTest("Invalid name"):
            with pytest.raises(ValueError) as e_info:
                Column("bad name", ColumnType.TEXT)
            assert e_info.value.args[0] == "Invalid column name: 'bad name'."

    def test_catalog_errors(self):
        with self.subTest("Empty catalog"):
            with pytest.raises(EmptyCatalogError) as e_info:
                MemoryCatalog([])
            assert e_info.value.args[0] == "A catalog needs at least one table."
        with self.subTest("Duplicate table"):
            with pytest.raises(DuplicateTableError) as e_info:
                SqliteCatalog([CPU, CPU])
            assert e_info.value.args[0] == "Table tb_cpu_dynamic is defined more than once."
        with self.subTest("Unknown backend"):
            with pytest.raises(ValueError) as e_info:
                create_catalog([CPU], "postgres")
            assert e_info.value.args[0] == (
                "Unknown storage backend 'postgres'; expected one of ['memory', 'sqlite']."
            )


class TestInsert(unittest.TestCase):
    def test_insert_rows(self):
        for backend in ("memory", "sqlite"):
            with self.subTest("Round trip", backend=backend):
                catalog = create_catalog([CPU], backend)
                self.assertEqual(4, insert_rows(catalog, "tb_cpu_dynamic", ROWS))
                self.assertEqual(ROWS, catalog.rows("tb_cpu_dynamic"))
                self.assertEqual(4, catalog.row_count())
            with self.subTest("Integers are accepted for reals", backend=backend):
                catalog = create_catalog([CPU], backend)
                catalog.insert_rows("tb_cpu_dynamic", [("n1", 2, 1, None)])
                self.assertEqual([("n1", 2.0, 1, None)], catalog.rows("tb_cpu_dynamic"))
            with self.subTest("Rows are validated before storing", backend=backend):
                catalog = create_catalog([CPU], backend)
                with pytest.raises(TypeMismatchError) as e_info:
                    catalog.insert_rows("tb_cpu_dynamic", [ROWS[0], ("n9", 1.0, "x", None)])
                assert e_info.value.args[0] == (
                    "The value 'x' does not fit column cores of type integer."
                )
                self.assertEqual([], catalog.rows("tb_cpu_dynamic"))

    def test_insert_errors(self):
        catalog = MemoryCatalog([CPU])
        with self.subTest("NULL in a non-nullable column"):
            with pytest.raises(TypeMismatchError) as e_info:
                catalog.insert_rows("tb_cpu_dynamic", [(None, 1.0, 1, None)])
            assert e_info.value.args[0] == "Column host does not accept NULL."
        with self.subTest("Wrong width"):
            with pytest.raises(TypeMismatchError) as e_info:
                catalog.insert_rows("tb_cpu_dynamic", [("n1", 1.0)])
            assert e_info.value.args[0] == (
                "Table tb_cpu_dynamic has 4 columns; got a row with 2 values."
            )
        with self.subTest("Booleans are not integers"):
            with pytest.raises(TypeMismatchError):
                catalog.insert_rows("tb_cpu_dynamic", [("n1", 1.0, True, None)])
        with self.subTest("Unknown table"):
            with pytest.raises(UnknownTableError) as e_info:
                catalog.insert_rows("tb_mem", [])
            assert e_info.value.args[0] == "Unknown table tb_mem."


class TestExecuteLocal(unittest.TestCase):
    def setUp(self):
        self.catalogs = {}
        for backend in ("memory", "sqlite"):
            catalog = create_catalog([CPU], backend)
            catalog.insert_rows("tb_cpu_dynamic", ROWS)
            self.catalogs[backend] = catalog

    def _run(self, backend, sql):
        return execute_local(self.catalogs[backend], parse(sql))

    def test_simple(self):
        for backend in self.catalogs:
            with self.subTest("Projection and filter", backend=backend):
                result = self._run(backend, "SELECT host FROM tb_cpu_dynamic WHERE cores = 8")
                self.assertEqual((("host", ColumnType.TEXT),), result.columns)
                self.assertEqual([("n2",), ("n3",)], sorted(result.rows))
            with self.subTest("NULL never satisfies a comparison", backend=backend):
                result = self._run(
                    backend, "SELECT host FROM tb_cpu_dynamic WHERE NOT (load > 1)"
                )
                self.assertEqual([("n1",)], sorted(result.rows))
            with self.subTest("IS NULL", backend=backend):
                result = self._run(backend, "SELECT host FROM tb_cpu_dynamic WHERE load IS NULL")
                self.assertEqual([("n3",)], list(result.rows))
            with self.subTest("IN list with NULL", backend=backend):
                result = self._run(
                    backend, "SELECT host FROM tb_cpu_dynamic WHERE cores NOT IN (4, NULL)"
                )
                self.assertEqual([], list(result.rows))
            with self.subTest("Timestamp compared with text", backend=backend):
                result = self._run(
                    backend, "SELECT host FROM tb_cpu_dynamic WHERE ts >= '2024-01-02 00:00:00'"
                )
                self.assertEqual([("n2",), ("n3",)], sorted(result.rows))
            with self.subTest("Star", backend=backend):
                result = self._run(backend, "SELECT * FROM tb_cpu_dynamic WHERE host = 'n4'")
                self.assertEqual([ROWS[3]], list(result.rows))

    def test_aggregate(self):
        for backend in self.catalogs:
            with self.subTest("Aggregates skip NULL", backend=backend):
                result = self._run(
                    backend,
                    "SELECT sum(load), count(load), count(*), min(cores), max(ts), avg(cores) "
                    "FROM tb_cpu_dynamic",
                )
                self.assertEqual(
                    (
                        ("sum(load)", ColumnType.REAL),
                        ("count(load)", ColumnType.INTEGER),
                        ("count(*)", ColumnType.INTEGER),
                        ("min(cores)", ColumnType.INTEGER),
                        ("max(ts)", ColumnType.TIMESTAMP),
                        ("avg(cores)", ColumnType.REAL),
                    ),
                    result.columns,
                )
                self.assertEqual(
                    [(5.0, 3, 4, 4, datetime.datetime(2024, 1, 3, 10), 20 / 3)], list(result.rows)
                )
            with self.subTest("Empty input", backend=backend):
                result = self._run(
                    backend,
                    "SELECT sum(cores), count(cores), max(load) FROM tb_cpu_dynamic WHERE 1 = 0",
                )
                self.assertEqual([(None, 0, None)], list(result.rows))

    def test_errors(self):
        catalog = self.catalogs["memory"]
        with self.subTest("Unknown column"):
            with pytest.raises(UnknownColumnError) as e_info:
                catalog.execute_local(parse("SELECT nope FROM tb_cpu_dynamic"))
            assert e_info.value.args[0] == "Unknown column nope."
        with self.subTest("Text compared with a number"):
            with pytest.raises(TypeMismatchError) as e_info:
                catalog.execute_local(parse("SELECT * FROM tb_cpu_dynamic WHERE host = 5"))
            assert e_info.value.args[0] == "The literal 5 cannot be compared with a text column."
        with self.subTest("Sum of text"):
            with pytest.raises(TypeMismatchError) as e_info:
                catalog.execute_local(parse("SELECT sum(host) FROM tb_cpu_dynamic"))
            assert e_info.value.args[0] == "sum requires a numeric column, not text."
        with self.subTest("Unresolved subquery"):
            query = parse(
                "SELECT * FROM tb_cpu_dynamic WHERE load > (SELECT avg(load) FROM tb_cpu_dynamic)"
            )
            with pytest.raises(ValueError) as e_info:
                catalog.execute_local(query)
            assert e_info.value.args[0] == "Subqueries must be resolved before local execution."
        with self.subTest("Unresolved membership subquery"):
            query = parse(
                "SELECT * FROM tb_cpu_dynamic WHERE cores IN (SELECT cores FROM tb_cpu_dynamic)"
            )
            with pytest.raises(ValueError) as e_info:
                catalog.execute_local(query)
            assert e_info.value.args[0] == "Subqueries must be resolved before local execution."

    def test_backends_agree(self):
        rows = generate_rows_uniform(CPU, 200, null_probability=0.1, rand_seed=7)
        catalogs = [create_catalog([CPU], backend) for backend in ("memory", "sqlite")]
        for catalog in catalogs:
            catalog.insert_rows("tb_cpu_dynamic", rows)
        queries = [
            "SELECT * FROM tb_cpu_dynamic WHERE load > 50 OR cores IS NULL",
            "SELECT host, ts FROM tb_cpu_dynamic WHERE host IN ('alpha', 'bravo') AND cores < 30",
            "SELECT sum(cores), count(*), min(load), max(host) FROM tb_cpu_dynamic",
            "SELECT avg(load), count(ts) FROM tb_cpu_dynamic WHERE ts < '2024-01-15 00:00:00'",
            "SELECT cores FROM tb_cpu_dynamic WHERE NOT (cores BETWEEN 10 AND 60)",
        ]
        for sql in queries:
            with self.subTest(sql=sql):
                memory, sqlite = (catalog.execute_local(parse(sql)) for catalog in catalogs)
                self.assertTrue(_rows_close(memory, sqlite))

    def test_execute_sql(self):
        catalog = self.catalogs["sqlite"]
        with self.subTest("Nested query"):
            result = catalog.execute_sql(
                "SELECT host FROM tb_cpu_dynamic "
                "WHERE load > (SELECT avg(load) FROM tb_cpu_dynamic)"
            )
            self.assertEqual([("n2",), ("n4",)], sorted(result.rows))
        with self.subTest("Timestamp literal inside a subquery"):
            result = catalog.execute_sql(
                "SELECT host FROM tb_cpu_dynamic WHERE cores IN "
                "(SELECT cores FROM tb_cpu_dynamic WHERE ts > '2024-01-02T12:00:00')"
            )
            self.assertEqual([("n2",), ("n3",)], sorted(result.rows))
        with self.subTest("Quoted identifier in the filter"):
            with pytest.raises(UnknownColumnError) as e_info:
                catalog.execute_sql('SELECT host FROM tb_cpu_dynamic WHERE "load > 0.1 OR 1" = 1')
            assert e_info.value.args[0] == "Unknown column load > 0.1 OR 1."
        with self.subTest("Unknown column in a subquery filter"):
            with pytest.raises(UnknownColumnError) as e_info:
                catalog.execute_sql(
                    "SELECT host FROM tb_cpu_dynamic WHERE cores IN "
                    "(SELECT cores FROM tb_cpu_dynamic WHERE nope > 1)"
                )
            assert e_info.value.args[0] == "Unknown column nope."

    def test_mixed_timezones(self):
        plus_two = datetime.timezone(datetime.timedelta(hours=2))
        rows = [
            ("a", None, None, datetime.datetime(2024, 1, 2)),
            ("b", None, None, datetime.datetime(2024, 1, 3, 2, tzinfo=plus_two)),
            ("c", None, None, datetime.datetime(2024, 1, 1, tzinfo=datetime.timezone.utc)),
        ]
        for backend in ("memory", "sqlite"):
            catalog = create_catalog([CPU], backend)
            catalog.insert_rows("tb_cpu_dynamic", rows)
            with self.subTest("Aware values are stored as naive UTC", backend=backend):
                result = catalog.execute_local(parse("SELECT min(ts), max(ts) FROM tb_cpu_dynamic"))
                self.assertEqual(
                    [(datetime.datetime(2024, 1, 1), datetime.datetime(2024, 1, 3))],
                    list(result.rows),
                )
            with self.subTest("Aware literal in a filter", backend=backend):
                result = catalog.execute_local(
                    parse("SELECT host FROM tb_cpu_dynamic WHERE ts > '2024-01-02T01:00:00+02:00'")
                )
                self.assertEqual([("a",), ("b",)], sorted(result.rows))


class TestPredicates(unittest.TestCase):
    def test_three_valued_logic(self):
        columns = [("a", ColumnType.INTEGER), ("b", ColumnType.INTEGER)]
        cases = [
            ("a = 1 AND b = 1", (1, None), None),
            ("a = 2 AND b = 1", (1, None), False),
            ("a = 1 OR b = 1", (1, None), True),
            ("a = 2 OR b = 1", (1, None), None),
            ("NOT (b = 1)", (1, None), None),
            ("b IS NULL", (1, None), True),
            ("a IN (2, NULL)", (1, None), None),
            ("a IN (1, NULL)", (1, None), True),
        ]
        for where, row, expected in cases:
            with self.subTest(where=where):
                query = parse(f"SELECT * FROM t WHERE {where}")
                predicate = compile_predicate(query.where, columns)
                self.assertIs(expected, predicate(row))


class TestFiles(unittest.TestCase):
    def test_csv(self):
        with self.subTest("Header selects the columns"):
            text = "ts,host,cores\n2024-01-01 10:00:00,n1,4\n,n2,\n"
            self.assertEqual(
                [
                    ("n1", None, 4, datetime.datetime(2024, 1, 1, 10)),
                    ("n2", None, None, None),
                ],
                read_csv(text, CPU),
            )
        with self.subTest("Offsets are converted to naive UTC"):
            text = "host,ts\nn1,2024-01-03T02:00:00+02:00\nn2,2024-01-02\n"
            self.assertEqual(
                [
                    ("n1", None, None, datetime.datetime(2024, 1, 3)),
                    ("n2", None, None, datetime.datetime(2024, 1, 2)),
                ],
                read_csv(text, CPU),
            )
        with self.subTest("Write then read"):
            text = write_csv(ROWS, CPU)
            self.assertEqual(
                "host,load,cores,ts\n"
                "n1,0.5,4,2024-01-01 10:00:00\n"
                "n2,1.5,8,2024-01-02 10:00:00\n"
                "n3,,8,2024-01-03 10:00:00\n"
                "n4,3.0,,\n",
                text,
            )
            self.assertEqual(ROWS, read_csv(text, CPU))
        with self.subTest("Invalid cell"):
            with pytest.raises(TypeMismatchError) as e_info:
                read_csv("host,cores\nn1,many\n", CPU)
            assert e_info.value.args[0] == "'many' is not a valid integer for column cores."
        with self.subTest("Missing non-nullable column"):
            with pytest.raises(TypeMismatchError) as e_info:
                read_csv("cores\n1\n", CPU)
            assert e_info.value.args[0] == "The CSV data lacks the non-nullable column host."
        with self.subTest("Unknown header"):
            with pytest.raises(UnknownColumnError):
                read_csv("host,nope\nn1,1\n", CPU)

    def test_recordset(self):
        with self.subTest("CSV rendering"):
            columns = (("a", ColumnType.INTEGER), ("b", ColumnType.TEXT))
            recordset = Recordset(columns, ((1, "x,y"),))
            self.assertEqual('a,b\n1,"x,y"\n', recordset.to_csv())
        with self.subTest("Arity"):
            with pytest.raises(ValueError) as e_info:
                Recordset((("a", ColumnType.INTEGER),), ((1, 2),))
            assert e_info.value.args[0] == (
                "Every row must have 1 values; got a row with 2 values."
            )

    def test_schema_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "schema.toml"
            dump_schema([CPU], path)
            self.assertEqual([CPU], load_schema(path))
