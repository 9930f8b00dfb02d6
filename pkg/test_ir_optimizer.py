#!/usr/bin/env python3
"""
IR 与优化器测试：内存估计、阈值规则、Reblock 插入、下推改写、融合、降级与 EXPLAIN
"""

import math

import numpy as np
import pytest

from config import EngineConfig, OptimizerConfig
from errors import PlanError
from ir_optimizer import (NodeKind, Plan, Representation, build_ir, build_model_plan, estimate_memory,
                          fuse_udf_subgraphs, lower_plan, optimize, pushdown_rewrite, select_representation)
from model_io import MODEL_PRESETS, Catalog, DenseLayer, Model, parse_manifest
from relational_engine import Column, ColumnType, RowRelation
from report_formatter import parse_explain
from tensor_core import Activation


def preset(name: str) -> Model:
    return parse_manifest(dict(MODEL_PRESETS[name]), name=name.replace("-", "_"))


def linalg(plan: Plan):
    return [plan.nodes[nid] for nid in plan.topological() if plan.nodes[nid].is_linalg]


@pytest.fixture
def catalog():
    catalog = Catalog()
    d1 = RowRelation.from_rows((Column("id", ColumnType.INT), Column("a", ColumnType.FLOAT),
                                Column("b", ColumnType.FLOAT)),
                               [(i, float(i), 1.0) for i in range(6)], key_columns=("id",))
    d2 = RowRelation.from_rows((Column("id", ColumnType.INT), Column("c", ColumnType.FLOAT)),
                               [(i, -float(i)) for i in range(6)], key_columns=("id",))
    catalog.register_table("d1", d1)
    catalog.register_table("d2", d2)
    catalog.register_model(Model("m", (3,), [DenseLayer(2, Activation.RELU), DenseLayer(2, Activation.SOFTMAX)]))
    catalog.register_model(Model("m2", (2,), [DenseLayer(2, Activation.SIGMOID)]))
    return catalog


def test_matmul_estimate_formula():
    plan = build_model_plan(preset("fraud-fc-256"), 1000)
    first = linalg(plan)[0]
    assert first.kind is NodeKind.MATMUL
    assert estimate_memory(first) == (1000 * 28 + 256 * 28 + 1000 * 256) * 8
    assert estimate_memory(first, batch=1) == (28 + 256 * 28 + 256) * 8


def test_conv_estimate_counts_f_k_and_output():
    plan = build_model_plan(preset("deepbench-conv3"), 1)
    conv = linalg(plan)[0]
    assert conv.kind is NodeKind.CONV2D
    assert estimate_memory(conv) == (49 * 513 + 2048 * 513 + 49 * 2048) * 8


def test_amazon_first_layer_is_relation_and_plan_is_hybrid():
    plan = select_representation(build_model_plan(preset("amazon-14k-fc"), 1000), OptimizerConfig())
    nodes = linalg(plan)
    assert nodes[0].est_bytes == 9_683_559_680
    assert nodes[0].params["u"] * nodes[0].params["k"] * 8 == 4_895_047_680
    assert nodes[0].representation is Representation.RELATION
    assert {n.representation for n in nodes} == {Representation.UDF, Representation.RELATION}


@pytest.mark.parametrize("name", ["fraud-fc-256", "encoder-fc"])
def test_small_models_are_all_udf(name):
    plan = select_representation(build_model_plan(preset(name), 1000), OptimizerConfig())
    assert {n.representation for n in linalg(plan)} == {Representation.UDF}


def test_extreme_thresholds_and_monotonicity():
    plan = build_model_plan(preset("amazon-14k-fc"), 1000)
    at_zero = select_representation(plan, OptimizerConfig(memory_threshold_bytes=0))
    at_inf = select_representation(plan, OptimizerConfig(memory_threshold_bytes=math.inf))
    assert {n.representation for n in linalg(at_zero)} == {Representation.RELATION}
    assert {n.representation for n in linalg(at_inf)} == {Representation.UDF}
    previous = None
    for threshold in (0, 1e6, 1e8, 1e9, 1e10, 1e12):
        chosen = select_representation(plan, OptimizerConfig(memory_threshold_bytes=threshold))
        relation = {n.id for n in linalg(chosen) if n.representation is Representation.RELATION}
        if previous is not None:
            assert relation <= previous
        previous = relation


def test_force_representation_through_engine_config():
    plan = build_model_plan(preset("amazon-14k-fc"), 1000)
    forced = select_representation(plan, EngineConfig(force_representation="udf"))
    assert {n.representation for n in linalg(forced)} == {Representation.UDF}


def test_reblock_inserted_between_dense_and_blocked():
    model = Model("tiny", (8,), [DenseLayer(4, Activation.IDENTITY)])
    plan = build_model_plan(model, 10)
    # MatMul 估计 (80+32+40)·8 = 1216，AddBias 估计 (40+4+40)·8 = 672
    chosen = select_representation(plan, OptimizerConfig(memory_threshold_bytes=1000, block_rows=4,
                                                          block_cols=4))
    kinds = chosen.kinds()
    assert kinds.index("Reblock:blocked") < kinds.index("MatMul") < kinds.index("Reblock:dense") < kinds.index("AddBias")
    matmul = next(n for n in chosen.nodes.values() if n.kind is NodeKind.MATMUL)
    assert matmul.block == (4, 4)

    lowered = optimize(plan, OptimizerConfig(memory_threshold_bytes=1000, block_rows=4, block_cols=4))
    kinds = lowered.plan.kinds()
    assert "EquiJoin:block_matmul" in kinds and "GroupAggregate:block_sum" in kinds
    assert kinds[-1] == "MapUDF:fused_linalg"


def test_fusion_collapses_udf_chain_and_can_be_disabled():
    plan = select_representation(build_model_plan(preset("fraud-fc-256"), 1000), OptimizerConfig())
    fused = fuse_udf_subgraphs(plan, OptimizerConfig())
    assert fused.kinds() == ["TableScan", "Project:features", "MapUDF:fused_linalg"]
    assert len(fused.nodes[fused.root].params["nodes"]) == 6
    unfused = fuse_udf_subgraphs(plan, OptimizerConfig(fusion_enabled=False))
    assert "MapUDF:fused_linalg" not in unfused.kinds()
    assert len(linalg(unfused)) == 6


def test_build_ir_expands_model_and_annotates_shapes(catalog):
    plan = build_ir("SELECT count(*) FROM d1 WHERE m2.predict(*) = True", catalog)
    kinds = plan.kinds()
    assert "ModelApply" not in kinds
    assert kinds[0] == "TableScan" and kinds[-1] == "GroupAggregate:count"
    features = plan.nodes[plan.meta["features"]]
    assert features.params["columns"] == ["a", "b"]
    assert all(n.out_shape for n in plan.nodes.values())
    assert all(n.representation is Representation.UNASSIGNED for n in linalg(plan))


def test_build_ir_reports_unknown_names(catalog):
    with pytest.raises(PlanError):
        build_ir("SELECT count(*) FROM nowhere", catalog)


def test_pushdown_rewrite_splits_first_layer(catalog):
    plan = build_ir("SELECT m.predict(*) FROM d1, d2 WHERE d1.id = d2.id", catalog)
    rewritten = pushdown_rewrite(plan, OptimizerConfig())
    kinds = rewritten.kinds()
    assert "EquiJoin:sum_partial" in kinds and "EquiJoin:concat" not in kinds
    assert kinds.count("Project:attach_vector") == 2
    assert rewritten.meta["pushdown"] == {"f1": 2, "f2": 1, "h": 2}
    cols = sorted(n.params["weight_cols"] for n in rewritten.nodes.values() if n.kind is NodeKind.MATMUL
                  and n.params.get("weight_cols"))
    assert cols == [(0, 2), (2, 3)]
    # 原计划不被修改
    assert "EquiJoin:concat" in plan.kinds()


def test_pushdown_skipped_when_disabled_or_too_wide(catalog):
    plan = build_ir("SELECT m.predict(*) FROM d1, d2 WHERE d1.id = d2.id", catalog)
    assert pushdown_rewrite(plan, OptimizerConfig(pushdown_enabled=False)) is plan
    assert pushdown_rewrite(plan, OptimizerConfig(pushdown_width_ratio=0.5)) is plan
    single = build_ir("SELECT m2.predict(*) FROM d1", catalog)
    assert pushdown_rewrite(single, OptimizerConfig()) is single


def test_lower_plan_requires_assigned_representations():
    plan = build_model_plan(preset("fraud-fc-256"), 10)
    with pytest.raises(PlanError):
        lower_plan(plan)


def test_topological_detects_cycles():
    plan = Plan()
    a = plan.add(NodeKind.TABLE_SCAN, {"table": "t"})
    b = plan.add(NodeKind.FILTER, {"predicates": []}, inputs=[a.id])
    a.inputs = [b.id]
    with pytest.raises(PlanError):
        plan.topological()


def test_explain_round_trips(catalog):
    executable = optimize(build_model_plan(preset("amazon-14k-fc"), 1000), OptimizerConfig())
    rows = parse_explain(executable.explain())
    assert [r.node_id for r in rows] == executable.order
    for row in rows:
        node = executable.plan.nodes[row.node_id]
        assert row.kind == node.label
        assert row.representation == node.representation.value
        assert row.est_bytes == node.est_bytes
        assert row.out_shape == node.out_shape
        assert row.block == node.block


def test_optimize_is_deterministic(catalog):
    text = "SELECT count(*) FROM d1, d2 WHERE d1.id = d2.id AND m.predict(*) = True"
    first = optimize(build_ir(text, catalog), OptimizerConfig(memory_threshold_bytes=64)).explain()
    second = optimize(build_ir(text, catalog), OptimizerConfig(memory_threshold_bytes=64)).explain()
    assert first == second
    assert np.all([line.count("\t") == 4 for line in first.splitlines()])
