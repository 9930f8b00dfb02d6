#!/usr/bin/env python3
"""
报告格式化工具
EXPLAIN 文本、执行报告和结果表的渲染；EXPLAIN 文本可以被重新解析
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from errors import PlanError

FIELD_SEP = "\t"


@dataclass
class ExplainRow:
    """EXPLAIN 的一行"""
    node_id: int
    kind: str
    representation: str
    block: Optional[Tuple[int, int]]
    est_bytes: int
    out_shape: Tuple[int, ...]


class ReportFormatter:
    """报告格式化器"""

    @staticmethod
    def format_shape(shape) -> str:
        return "x".join(str(int(d)) for d in shape) if shape else "-"

    @staticmethod
    def parse_shape(text: str) -> Tuple[int, ...]:
        if text == "-":
            return ()
        return tuple(int(d) for d in text.split("x"))

    @staticmethod
    def format_representation(node) -> str:
        text = node.representation.value
        if node.block:
            text += f"@{node.block[0]}x{node.block[1]}"
        return text

    @staticmethod
    def format_explain(plan) -> str:
        """
        每个节点一行，制表符分隔：node_id kind representation est_bytes out_shape

        节点按执行（拓扑）顺序输出；块矩阵输出的节点在表示后附带 @RxC 块大小
        """
        lines = []
        for node_id in plan.topological():
            node = plan.nodes[node_id]
            lines.append(FIELD_SEP.join([
                str(node.id),
                node.label,
                ReportFormatter.format_representation(node),
                str(int(node.est_bytes)),
                ReportFormatter.format_shape(node.out_shape),
            ]))
        return "\n".join(lines)

    @staticmethod
    def parse_explain(text: str) -> List[ExplainRow]:
        """解析 EXPLAIN 文本"""
        rows = []
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            fields = line.split(FIELD_SEP)
            if len(fields) != 5:
                raise PlanError(f"explain line {number} has {len(fields)} fields, expected 5")
            representation, _, block = fields[2].partition("@")
            block_size = tuple(int(v) for v in block.split("x")) if block else None
            rows.append(ExplainRow(int(fields[0]), fields[1], representation, block_size,
                                   int(fields[3]), ReportFormatter.parse_shape(fields[4])))
        return rows

    @staticmethod
    def format_value(value: Any) -> str:
        if isinstance(value, (float, np.floating)):
            value = float(value)
            return repr(value) if math.isfinite(value) else str(value)
        if isinstance(value, np.ndarray):
            return "[" + ",".join(ReportFormatter.format_value(v) for v in value.tolist()) + "]"
        if isinstance(value, list):
            return "[" + ",".join(ReportFormatter.format_value(v) for v in value) + "]"
        return str(value)

    @staticmethod
    def format_fields(prefix: str, fields: Dict[str, Any]) -> str:
        parts = [prefix] + [f"{key}={ReportFormatter.format_value(value)}" for key, value in fields.items()]
        return FIELD_SEP.join(parts)

    @staticmethod
    def format_report(report, timings: bool = True) -> str:
        """
        执行报告：字段顺序固定，便于逐行比较

        timings=False 时省略全部计时字段，同一种子下重复运行的输出逐字节相同
        """
        lines = [FIELD_SEP.join(["query", report.query])]
        if timings:
            for stage, seconds in report.stage_seconds.items():
                lines.append(FIELD_SEP.join(["stage", stage, f"{seconds:.6f}"]))
        for node in report.nodes:
            fields = [
                "node", str(node["id"]), node["kind"], node["representation"], str(node["est_bytes"]),
                ReportFormatter.format_shape(node["out_shape"]),
            ]
            if timings:
                fields.append(f"{node['seconds']:.6f}")
            lines.append(FIELD_SEP.join(fields))
        lines.append(ReportFormatter.format_fields("pool", report.pool_stats))
        lines.append(ReportFormatter.format_fields("cache", report.cache_stats))
        lines.append(ReportFormatter.format_fields("inference", {"calls": report.inference_calls,
                                                                 "rows": report.inference_rows}))
        lines.append(FIELD_SEP.join(["rows", str(report.result_rows)]))
        return "\n".join(lines)

    @staticmethod
    def format_relation(relation, limit: Optional[int] = None) -> str:
        """结果表：表头一行，之后每行一个元组"""
        lines = [FIELD_SEP.join(relation.column_names)]
        for index, row in enumerate(relation.rows()):
            if limit is not None and index >= limit:
                lines.append(f"... ({len(relation) - limit} more rows)")
                break
            lines.append(FIELD_SEP.join(ReportFormatter.format_value(v) for v in row))
        return "\n".join(lines)


# 快捷函数
def format_explain(plan) -> str:
    return ReportFormatter.format_explain(plan)


def parse_explain(text: str) -> List[ExplainRow]:
    return ReportFormatter.parse_explain(text)


def format_report(report, timings: bool = True) -> str:
    return ReportFormatter.format_report(report, timings)


def format_relation(relation, limit: Optional[int] = None) -> str:
    return ReportFormatter.format_relation(relation, limit)
