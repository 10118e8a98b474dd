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

"""Tests for the datasets module."""

import datetime
import unittest
from collections import Counter

import pytest
from idss.datasets import (
    EPOCH,
    TEXT_VOCABULARY,
    generate_rows_uniform,
    partition_random,
    partition_round_robin,
)
from idss.storage import Column, MemoryCatalog, TableSchema

SCHEMA = TableSchema(
    "tb_cpu_dynamic",
    (
        Column("host", "text", nullable=False),
        Column("load", "real"),
        Column("cores", "integer"),
        Column("ts", "timestamp"),
    ),
)


class TestGenerateRows(unittest.TestCase):
    def test_generate_rows_uniform(self):
        with self.subTest("Basic test"):
            rows = generate_rows_uniform(SCHEMA, 200, rand_seed=7)
            self.assertEqual(200, len(rows))
            for host, load, cores, ts in rows:
                self.assertIn(host, TEXT_VOCABULARY)
                self.assertTrue(0.0 <= load < 100.0)
                self.assertTrue(0 <= cores < 100)
                self.assertTrue(EPOCH <= ts < EPOCH + datetime.timedelta(days=30))
        with self.subTest("Rows fit the schema"):
            catalog = MemoryCatalog([SCHEMA])
            self.assertEqual(200, catalog.insert_rows("tb_cpu_dynamic", rows))
        with self.subTest("Seeded"):
            self.assertEqual(rows, generate_rows_uniform(SCHEMA, 200, rand_seed=7))
            self.assertNotEqual(rows, generate_rows_uniform(SCHEMA, 200, rand_seed=8))
        with self.subTest("Nulls only in nullable columns"):
            rows = generate_rows_uniform(SCHEMA, 200, null_probability=1.0, rand_seed=7)
            self.assertTrue(all(row[0] is not None for row in rows))
            self.assertTrue(all(row[1:] == (None, None, None) for row in rows))
        with self.subTest("No rows"):
            self.assertEqual([], generate_rows_uniform(SCHEMA, 0))
        with self.subTest("Negative num_rows"):
            with pytest.raises(ValueError) as e_info:
                generate_rows_uniform(SCHEMA, -1)
            assert (
                e_info.value.args[0]
                == "The number of rows must be specified with a non-negative integer."
            )
        with self.subTest("Bad null probability"):
            with pytest.raises(ValueError) as e_info:
                generate_rows_uniform(SCHEMA, 1, null_probability=1.5)
            assert e_info.value.args[0] == "The null probability must lie in the interval [0, 1]."


class TestPartition(unittest.TestCase):
    def setUp(self):
        self.rows = [(f"host-{i}", float(i), i, None) for i in range(23)]

    def test_partition_round_robin(self):
        parts = partition_round_robin(self.rows, 4)
        self.assertEqual([6, 6, 6, 5], [len(part) for part in parts])
        self.assertEqual(self.rows[1::4], parts[1])
        with self.subTest("Bad num_peers"):
            with pytest.raises(ValueError) as e_info:
                partition_round_robin(self.rows, 0)
            assert (
                e_info.value.args[0]
                == "The number of peers must be specified with a positive integer."
            )

    def test_partition_random(self):
        parts = partition_random(self.rows, 5, rand_seed=3)
        with self.subTest("Disjoint cover"):
            self.assertEqual(5, len(parts))
            merged = Counter(row for part in parts for row in part)
            self.assertEqual(Counter(self.rows), merged)
        with self.subTest("Order kept"):
            for part in parts:
                self.assertEqual(sorted(part, key=lambda row: row[2]), part)
        with self.subTest("Seeded"):
            self.assertEqual(parts, partition_random(self.rows, 5, rand_seed=3))
        with self.subTest("Bad num_peers"):
            with pytest.raises(ValueError):
                partition_random(self.rows, 0)
