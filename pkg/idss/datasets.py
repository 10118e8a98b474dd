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
"""Functions for generating table rows and spreading them across peers."""

from __future__ import annotations

import datetime
from collections.abc import Sequence

import numpy as np

from .storage import ColumnType, Row, TableSchema

TEXT_VOCABULARY = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel")

EPOCH = datetime.datetime(2024, 1, 1)


def generate_rows_uniform(
    schema: TableSchema,
    num_rows: int,
    *,
    null_probability: float = 0.0,
    rand_seed: np.random.Generator | int | None = None,
) -> list[Row]:
    """Generate rows of a table with values drawn uniformly at random.

    Integers are drawn from ``[0, 100)``, reals from ``[0, 100)``, text from a small vocabulary
    so that equality predicates match, and timestamps from the 30 days after 2024-01-01 with
    one-second resolution.

    Args:
        schema: The table to generate rows for
        num_rows: The number of rows to generate
        null_probability: The probability of a nullable cell being ``NULL``
        rand_seed: A seed for controlling randomness

    Returns:
        A list of ``num_rows`` rows conforming to ``schema``.

    Raises:
        ValueError: ``num_rows`` must be a non-negative integer.
        ValueError: ``null_probability`` must lie in ``[0, 1]``.

    """
    if num_rows < 0:
        raise ValueError("The number of rows must be specified with a non-negative integer.")
    if not 0.0 <= null_probability <= 1.0:
        raise ValueError("The null probability must lie in the interval [0, 1].")

    rng = np.random.default_rng(rand_seed)

    columns: list[list] = []
    for column in schema.columns:
        if column.type is ColumnType.INTEGER:
            values: list = [int(v) for v in rng.integers(0, 100, size=num_rows)]
        elif column.type is ColumnType.REAL:
            values = [float(v) for v in rng.uniform(0.0, 100.0, size=num_rows)]
        elif column.type is ColumnType.TEXT:
            values = [TEXT_VOCABULARY[i] for i in rng.integers(0, len(TEXT_VOCABULARY), num_rows)]
        else:
            seconds = rng.integers(0, 30 * 24 * 3600, size=num_rows)
            values = [EPOCH + datetime.timedelta(seconds=int(s)) for s in seconds]
        if column.nullable and null_probability > 0:
            mask = rng.random(num_rows) < null_probability
            values = [None if masked else value for value, masked in zip(values, mask)]
        columns.append(values)

    return [tuple(column[i] for column in columns) for i in range(num_rows)]


def partition_round_robin(rows: Sequence[Row], num_peers: int) -> list[list[Row]]:
    """Deal rows to peers in turn, the ``i``-th row going to peer ``i % num_peers``.

    Raises:
        ValueError: ``num_peers`` must be a positive integer.

    """
    if num_peers < 1:
        raise ValueError("The number of peers must be specified with a positive integer.")
    return [list(rows[peer::num_peers]) for peer in range(num_peers)]


def partition_random(
    rows: Sequence[Row],
    num_peers: int,
    rand_seed: np.random.Generator | int | None = None,
) -> list[list[Row]]:
    """Assign every row to a peer chosen uniformly at random.

    Every row lands on exactly one peer, so the partitions are disjoint and their union is the
    input. Some peers may receive no rows.

    Args:
        rows: The rows to distribute
        num_peers: The number of peers
        rand_seed: A seed for controlling randomness

    Returns:
        One list of rows per peer, each keeping the input order.

    Raises:
        ValueError: ``num_peers`` must be a positive integer.

    """
    if num_peers < 1:
        raise ValueError("The number of peers must be specified with a positive integer.")

    rng = np.random.default_rng(rand_seed)

    owners = rng.integers(0, num_peers, size=len(rows))
    partitions: list[list[Row]] = [[] for _ in range(num_peers)]
    for row, owner in zip(rows, owners):
        partitions[int(owner)].append(row)
    return partitions
