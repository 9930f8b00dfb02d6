#!/usr/bin/env python3
"""
报告格式化测试
"""

import math

import numpy as np
import pytest

from config import EngineConfig, OptimizerConfig
from errors import PlanError
from ir_optimizer import build_model_plan, optimize
from model_io import DenseLayer, Model
from query_engine import QueryReport
from relational_engine import Column, ColumnType, RowRelation
from report_formatter import ReportFormatter, format_relation, format_report, parse_explain
from tensor_core import Activation


def relation_plan(threshold: float):
    model = Model("m", (8,), [DenseLayer(4, Activation.RELU), DenseLayer(2, Activation.SOFTMAX)])
    config = EngineConfig(optimizer=OptimizerConfig(memory_threshold_bytes=threshold, block_rows=4, block_cols=4))
    return optimize(build_model_plan(model, 10), config)


@pytest.mark.parametrize("threshold", [0, math.inf])
def test_explain_text_parses_back(threshold):
    executable = relation_plan(threshold)
    text = executable.explain()
    rows = parse_explain(text)
    assert [row.node_id for row in rows] == list(executable.order)
    for row in rows:
        node = executable.plan.nodes[row.node_id]
        assert row.kind == node.label
        assert row.representation == node.representation.value
        assert row.est_bytes == int(node.est_bytes)
        assert row.out_shape == tuple(node.out_shape)
        assert row.block == (tuple(node.block) if node.block else None)


def test_explain_shows_block_size_for_relation_nodes():
    rows = parse_explain(relation_plan(0).explain())
    blocked = [row for row in rows if row.representation == "RELATION"]
    assert blocked
    assert all(row.block is not None for row in blocked)
    # softmax 按整行成块
    blocks = {row.kind: row.block for row in blocked}
    assert blocks["EquiJoin:block_matmul"] == (4, 4)
    assert (4, 2) in blocks.values()


def test_parse_explain_rejects_short_lines():
    with pytest.raises(PlanError):
        parse_explain("1\tTableScan\tnone\t0")
    assert parse_explain("\n\n") == []


def test_format_value():
    assert ReportFormatter.format_value(np.float64(0.1)) == "0.1"
    assert ReportFormatter.format_value(float("inf")) == "inf"
    assert ReportFormatter.format_value(np.array([1.0, 2.5])) == "[1.0,2.5]"
    assert ReportFormatter.format_value(7) == "7"
    assert ReportFormatter.format_value("x") == "x"


def test_shape_round_trip():
    assert ReportFormatter.format_shape((3, 4)) == "3x4"
    assert ReportFormatter.format_shape(()) == "-"
    assert ReportFormatter.parse_shape("-") == ()
    assert ReportFormatter.parse_shape("5x1x2") == (5, 1, 2)


def test_format_relation_with_limit():
    relation = RowRelation.from_rows((Column("id", ColumnType.INT), Column("v", ColumnType.VECTOR, 2)),
                                     [(1, [0.0, 1.0]), (2, [2.0, 3.0]), (3, [4.0, 5.0])])
    assert format_relation(relation).splitlines() == ["id\tv", "1\t[0.0,1.0]", "2\t[2.0,3.0]", "3\t[4.0,5.0]"]
    assert format_relation(relation, limit=1).splitlines() == ["id\tv", "1\t[0.0,1.0]", "... (2 more rows)"]


def sample_report() -> QueryReport:
    return QueryReport(
        query="SELECT count(*) FROM t",
        stage_seconds={"parse": 0.001, "execute": 0.25},
        nodes=[{"id": 0, "kind": "TableScan", "representation": "none", "est_bytes": 0,
                "out_shape": (3, 1), "seconds": 0.002}],
        pool_stats={"hits": 2, "misses": 1},
        cache_stats={"mode": "off"},
        inference_calls=0,
        result_rows=1,
    )


def test_format_report_with_and_without_timings():
    report = sample_report()
    timed = format_report(report).splitlines()
    assert timed[0] == "query\tSELECT count(*) FROM t"
    assert timed[1] == "stage\tparse\t0.001000"
    assert "node\t0\tTableScan\tnone\t0\t3x1\t0.002000" in timed
    assert timed[-1] == "rows\t1"

    plain = format_report(report, timings=False).splitlines()
    assert not any(line.startswith("stage") for line in plain)
    assert "node\t0\tTableScan\tnone\t0\t3x1" in plain
    assert "pool\thits=2\tmisses=1" in plain
    assert "inference\tcalls=0\trows=0" in plain
