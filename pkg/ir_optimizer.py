#!/usr/bin/env python3
"""
统一 IR 与规则优化器

计划是关系算子与线性代数算子混合的 DAG。优化顺序：
build_ir → pushdown_rewrite → select_representation → fuse_udf_subgraphs → lower_plan
"""

import copy
import heapq
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from config import ELEMENT_SIZE_BYTES, EngineConfig, OptimizerConfig
from errors import PlanError
from model_io import Conv2DLayer, DenseLayer, EmbeddingLayer, FlattenLayer, Layer, Model
from relational_engine import ColumnType
from sql_parser import PREDICT_COLUMN, QueryAst, bind_query, parse_query
from tensor_core import Activation

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]
PARTIAL_COLUMN = "__partial"


class NodeKind(str, Enum):
    TABLE_SCAN = "TableScan"
    FILTER = "Filter"
    PROJECT = "Project"
    EQUI_JOIN = "EquiJoin"
    GROUP_AGGREGATE = "GroupAggregate"
    MAP_UDF = "MapUDF"
    MATMUL = "MatMul"
    ADD_BIAS = "AddBias"
    ACTIVATION = "Activation"
    CONV2D = "Conv2D"
    FLATTEN = "Flatten"
    EMBEDDING_LOOKUP = "EmbeddingLookup"
    REBLOCK = "Reblock"
    MODEL_APPLY = "ModelApply"


class Representation(str, Enum):
    UNASSIGNED = "UNASSIGNED"
    UDF = "UDF"
    RELATION = "RELATION"
    NONE = "-"  # 关系算子与 Reblock 没有表示选择


LINALG_KINDS = frozenset({NodeKind.MATMUL, NodeKind.ADD_BIAS, NodeKind.ACTIVATION, NodeKind.CONV2D,
                          NodeKind.FLATTEN, NodeKind.EMBEDDING_LOOKUP})
# 关系表示下以块矩阵为输入输出的算子；其余线性代数算子在两种表示下都交换稠密值
BLOCKABLE_KINDS = frozenset({NodeKind.MATMUL, NodeKind.ADD_BIAS, NodeKind.ACTIVATION})


@dataclass
class PlanNode:
    id: int
    kind: NodeKind
    params: Dict[str, Any] = field(default_factory=dict)
    inputs: List[int] = field(default_factory=list)
    in_shapes: List[Shape] = field(default_factory=list)
    out_shape: Shape = ()
    representation: Representation = Representation.NONE
    est_bytes: int = 0
    block: Optional[Tuple[int, int]] = None  # 块矩阵输出的块大小

    @property
    def is_linalg(self) -> bool:
        return self.kind in LINALG_KINDS

    @property
    def label(self) -> str:
        """EXPLAIN 中的算子名，带关键参数"""
        if self.kind is NodeKind.ACTIVATION:
            return f"Activation:{self.params['kind']}"
        if self.kind in (NodeKind.PROJECT,):
            return f"Project:{self.params['mode']}"
        if self.kind is NodeKind.EQUI_JOIN:
            return f"EquiJoin:{self.params.get('combiner', 'concat')}"
        if self.kind is NodeKind.GROUP_AGGREGATE:
            return f"GroupAggregate:{self.params['op']}"
        if self.kind is NodeKind.MAP_UDF:
            return f"MapUDF:{self.params['udf']}"
        if self.kind is NodeKind.REBLOCK:
            return f"Reblock:{self.params['to']}"
        return self.kind.value


@dataclass
class Plan:
    nodes: Dict[int, PlanNode] = field(default_factory=dict)
    root: Optional[int] = None
    meta: Dict[str, Any] = field(default_factory=dict)
    next_id: int = 0

    def add(self, kind: NodeKind, params: Optional[Dict[str, Any]] = None, inputs: Sequence[int] = (),
            in_shapes: Sequence[Shape] = (), out_shape: Shape = (),
            representation: Optional[Representation] = None, **extra) -> PlanNode:
        node_id = max(self.next_id, max(self.nodes, default=-1) + 1)
        self.next_id = node_id + 1
        if representation is None:
            representation = Representation.UNASSIGNED if kind in LINALG_KINDS else Representation.NONE
        node = PlanNode(node_id, kind, dict(params or {}), list(inputs), [tuple(s) for s in in_shapes],
                        tuple(out_shape), representation, **extra)
        self.nodes[node_id] = node
        return node

    def consumers(self, node_id: int) -> List[int]:
        return sorted(n.id for n in self.nodes.values() if node_id in n.inputs)

    def rewire(self, old: int, new: int) -> None:
        """把 old 的所有消费者（以及根与元数据引用）改为指向 new"""
        for node in self.nodes.values():
            if node.id != new:
                node.inputs = [new if i == old else i for i in node.inputs]
        if self.root == old:
            self.root = new
        for key, value in list(self.meta.items()):
            if value == old and isinstance(value, int) and not isinstance(value, bool):
                self.meta[key] = new

    def remove(self, node_id: int) -> None:
        del self.nodes[node_id]

    def topological(self) -> List[int]:
        """拓扑序（同层按节点 id 升序）；有环时抛出 PlanError"""
        indegree = {nid: 0 for nid in self.nodes}
        for node in self.nodes.values():
            for i in node.inputs:
                if i not in self.nodes:
                    raise PlanError(f"node {node.id} reads missing node {i}")
                indegree[node.id] += 1
        ready = [nid for nid, d in indegree.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            nid = heapq.heappop(ready)
            order.append(nid)
            for consumer in self.consumers(nid):
                indegree[consumer] -= 1
                if indegree[consumer] == 0:
                    heapq.heappush(ready, consumer)
        if len(order) != len(self.nodes):
            raise PlanError("plan contains a cycle")
        return order

    def ancestors(self, node_id: int) -> set:
        seen, stack = set(), [node_id]
        while stack:
            for i in self.nodes[stack.pop()].inputs:
                if i not in seen:
                    seen.add(i)
                    stack.append(i)
        return seen

    def copy(self) -> "Plan":
        return copy.deepcopy(self)

    def kinds(self) -> List[str]:
        return [self.nodes[nid].label for nid in self.topological()]

    def explain(self) -> str:
        from report_formatter import format_explain
        return format_explain(self)


# ---- 形状与内存估计 ----

def linalg_shapes(kind: NodeKind, params: Dict[str, Any], batch: int) -> Tuple[List[Shape], Shape]:
    """线性代数算子在批大小 batch 下的 (操作数形状, 输出形状)；权重也算作操作数"""
    n = batch
    if kind is NodeKind.MATMUL:
        k, u = params["k"], params["u"]
        return [(n, k), (u, k)], (n, u)
    if kind is NodeKind.ADD_BIAS:
        u = params["u"]
        return [(n, u), (u,)], (n, u)
    if kind in (NodeKind.ACTIVATION, NodeKind.FLATTEN, NodeKind.REBLOCK):
        width = params["width"]
        return [(n, width)], (n, width)
    if kind is NodeKind.CONV2D:
        out_h = params["height"] - params["kernel_h"] + 1
        out_w = params["width"] - params["kernel_w"] + 1
        q = params["kernel_h"] * params["kernel_w"] * params["channels"] + 1
        oc = params["out_channels"]
        return [(n * out_h * out_w, q), (oc, q)], (n, out_h * out_w * oc)
    if kind is NodeKind.EMBEDDING_LOOKUP:
        length, dim = params["length"], params["dim"]
        width = dim if params["reduce"] == "sum" else length * dim
        return [(n, length), (params["dict_size"], dim)], (n, width)
    raise PlanError(f"no shape rule for {kind.value}")


def estimate_memory(node: PlanNode, batch: Optional[int] = None, element_size: int = ELEMENT_SIZE_BYTES) -> int:
    """
    算子内存需求 = (输入元素数之和 + 输出元素数) × 元素字节数

    矩阵乘 (m×k)·(k×u) 为 m·k + u·k + m·u；卷积按 F、K 与输出计；
    batch 给定时按该批大小重新计算形状
    """
    if batch is not None and (node.kind in LINALG_KINDS or node.kind is NodeKind.REBLOCK):
        in_shapes, out_shape = linalg_shapes(node.kind, node.params, batch)
    else:
        in_shapes, out_shape = node.in_shapes, node.out_shape
    if not out_shape or any(not s for s in in_shapes):
        raise PlanError(f"node {node.id} ({node.kind.value}) has unresolved shapes")
    elements = sum(math.prod(s) for s in in_shapes) + math.prod(out_shape)
    return elements * element_size


def _layer_specs(layer: Layer, index: int, in_shape: Shape, model_name: str) -> List[Tuple[NodeKind, Dict[str, Any]]]:
    ref = {"model": model_name, "layer": index}
    if isinstance(layer, DenseLayer):
        specs = [(NodeKind.MATMUL, {**ref, "k": in_shape[0], "u": layer.units, "weight_cols": None}),
                 (NodeKind.ADD_BIAS, {**ref, "u": layer.units})]
        if layer.activation is not Activation.IDENTITY:
            specs.append((NodeKind.ACTIVATION, {**ref, "kind": layer.activation.value, "width": layer.units}))
        return specs
    if isinstance(layer, Conv2DLayer):
        height, width, channels = in_shape
        params = {**ref, "height": height, "width": width, "channels": channels,
                  "out_channels": layer.out_channels, "kernel_h": layer.kernel_h, "kernel_w": layer.kernel_w}
        specs = [(NodeKind.CONV2D, params)]
        if layer.activation is not Activation.IDENTITY:
            out = layer.output_shape(in_shape)
            specs.append((NodeKind.ACTIVATION, {**ref, "kind": layer.activation.value, "width": math.prod(out)}))
        return specs
    if isinstance(layer, FlattenLayer):
        return [(NodeKind.FLATTEN, {**ref, "width": math.prod(in_shape)})]
    if isinstance(layer, EmbeddingLayer):
        return [(NodeKind.EMBEDDING_LOOKUP, {**ref, "length": in_shape[0], "dict_size": layer.dict_size,
                                             "dim": layer.dim, "reduce": layer.reduce})]
    raise PlanError(f"unsupported layer {type(layer).__name__}")


def layer_memory_estimate(layer: Layer, in_shape: Shape, batch: int, element_size: int = ELEMENT_SIZE_BYTES) -> int:
    """一层展开后各算子内存估计之和"""
    total = 0
    for kind, params in _layer_specs(layer, 0, tuple(in_shape), ""):
        in_shapes, out_shape = linalg_shapes(kind, params, batch)
        total += (sum(math.prod(s) for s in in_shapes) + math.prod(out_shape)) * element_size
    return total


def _add_linalg(plan: Plan, kind: NodeKind, params: Dict[str, Any], source: int, batch: int) -> PlanNode:
    in_shapes, out_shape = linalg_shapes(kind, params, batch)
    return plan.add(kind, params, inputs=[source], in_shapes=in_shapes, out_shape=out_shape)


def expand_model(plan: Plan, source: int, model: Model, batch: int) -> int:
    """在 source（n × input_dim 的特征矩阵）之后展开模型的层图，返回最后一个节点 id"""
    chain = model.shape_chain()
    current = source
    for index, layer in enumerate(model.layers):
        for kind, params in _layer_specs(layer, index, chain[index], model.name):
            current = _add_linalg(plan, kind, params, current, batch).id
    return current


def _expand_model_apply(plan: Plan, models: Dict[str, Model]) -> None:
    for node in [n for n in plan.nodes.values() if n.kind is NodeKind.MODEL_APPLY]:
        model = models[node.params["model"]]
        last = expand_model(plan, node.inputs[0], model, node.out_shape[0])
        plan.rewire(node.id, last)
        plan.remove(node.id)
        plan.meta["model_output"] = last


def _optimizer_view(config: Union[EngineConfig, OptimizerConfig, None]) -> Tuple[float, OptimizerConfig]:
    if config is None:
        config = OptimizerConfig()
    if isinstance(config, EngineConfig):
        return config.effective_threshold, config.optimizer
    return config.memory_threshold_bytes, config


def _join_rows(left: PlanNode, right: PlanNode, join: Tuple[str, str], tables: List[str], catalog) -> int:
    n_left, n_right = left.out_shape[0], right.out_shape[0]
    right_keys = {f"{tables[1]}.{k}" for k in catalog.tables[tables[1]].key_columns}
    left_keys = {f"{tables[0]}.{k}" for k in catalog.tables[tables[0]].key_columns}
    if join[1] in right_keys:
        return n_left
    if join[0] in left_keys:
        return n_right
    return n_left * n_right


def build_ir(query: Union[str, QueryAst], catalog, params: Optional[Dict[str, Any]] = None) -> Plan:
    """
    查询 → 完整标注形状的 DAG，线性代数节点表示为 UNASSIGNED

    ModelApply 在此展开为层图：dense → MatMul → AddBias → Activation，
    conv → Conv2D → Activation，flatten → Flatten，embedding → EmbeddingLookup
    """
    ast = parse_query(query) if isinstance(query, str) else query
    bound = bind_query(ast, catalog, params, error_cls=PlanError)
    plan = Plan(meta={"query": ast.render()})
    two = len(bound.tables) == 2

    branches = []
    for table in bound.tables:
        relation = catalog.tables[table].relation
        columns = bound.column_names[table]
        node = plan.add(NodeKind.TABLE_SCAN, {"table": table, "columns": columns, "qualify": two},
                        out_shape=(len(relation), len(columns)))
        if bound.table_filters[table]:
            node = plan.add(NodeKind.FILTER, {"predicates": list(bound.table_filters[table])},
                            inputs=[node.id], in_shapes=[node.out_shape], out_shape=node.out_shape)
        branches.append(node)

    current = branches[0]
    if two:
        left, right = branches
        rows = _join_rows(left, right, bound.join, bound.tables, catalog)
        current = plan.add(NodeKind.EQUI_JOIN, {"left_key": [bound.join[0]], "right_key": [bound.join[1]],
                                                "combiner": "concat"},
                           inputs=[left.id, right.id], in_shapes=[left.out_shape, right.out_shape],
                           out_shape=(rows, left.out_shape[1] + right.out_shape[1]))
        if bound.post_join_filters:
            current = plan.add(NodeKind.FILTER, {"predicates": list(bound.post_join_filters)},
                               inputs=[current.id], in_shapes=[current.out_shape], out_shape=current.out_shape)

    rows = current.out_shape[0]
    models = {}
    if bound.model_name is not None:
        model = catalog.models[bound.model_name]
        models[model.name] = model
        widths = []
        for name in bound.feature_columns:
            table = bound.tables[bound.feature_sides[len(widths)]]
            column = catalog.tables[table].relation.column(name.split(".", 1)[1] if two else name)
            widths.append(column.width if column.type is ColumnType.VECTOR else 1)
        features = plan.add(NodeKind.PROJECT, {"mode": "features", "columns": list(bound.feature_columns),
                                               "widths": widths, "sides": list(bound.feature_sides)},
                            inputs=[current.id], in_shapes=[current.out_shape], out_shape=(rows, model.input_dim))
        apply = plan.add(NodeKind.MODEL_APPLY, {"model": model.name}, inputs=[features.id],
                         in_shapes=[features.out_shape], out_shape=(rows, model.output_dim))
        current = plan.add(NodeKind.PROJECT, {"mode": "attach", "column": PREDICT_COLUMN,
                                              "output_dim": model.output_dim},
                           inputs=[current.id, apply.id], in_shapes=[current.out_shape, apply.out_shape],
                           out_shape=(rows, current.out_shape[1] + 1))
        plan.meta.update(features=features.id, attach=current.id, model=model.name)
        if bound.predict_filters:
            current = plan.add(NodeKind.FILTER, {"predicates": list(bound.predict_filters)},
                               inputs=[current.id], in_shapes=[current.out_shape], out_shape=current.out_shape)

    if bound.select_kind == "count":
        group = bound.group_by
        current = plan.add(NodeKind.GROUP_AGGREGATE, {"op": "count", "group_by": group},
                           inputs=[current.id], in_shapes=[current.out_shape],
                           out_shape=(current.out_shape[0] if group else 1, 2 if group else 1))
    else:
        columns = [PREDICT_COLUMN] if bound.select_kind == "predict" else list(bound.output_columns)
        current = plan.add(NodeKind.PROJECT, {"mode": "output", "columns": columns},
                           inputs=[current.id], in_shapes=[current.out_shape],
                           out_shape=(current.out_shape[0], len(columns)))
    plan.root = current.id
    _expand_model_apply(plan, models)
    logger.info(f"🔧 构建 IR: {len(plan.nodes)} 个节点, 模型 {bound.model_name or '-'}")
    return plan


def build_model_plan(model: Model, batch: int) -> Plan:
    """
    单独为模型构建计划：虚拟输入扫描 → 特征投影 → 层图

    用于只有形状的预置模型（规划与 EXPLAIN），执行时通过 feed 提供特征矩阵
    """
    plan = Plan(meta={"query": f"<model {model.name} batch {batch}>", "model": model.name})
    scan = plan.add(NodeKind.TABLE_SCAN, {"table": None, "columns": [], "qualify": False},
                    out_shape=(batch, model.input_dim))
    features = plan.add(NodeKind.PROJECT, {"mode": "features", "columns": [], "widths": [], "sides": []},
                        inputs=[scan.id], in_shapes=[scan.out_shape], out_shape=(batch, model.input_dim))
    last = expand_model(plan, features.id, model, batch)
    plan.root = last
    plan.meta.update(features=features.id, model_output=last)
    return plan


# ---- 下推改写 ----

def _feature_join(plan: Plan, features: PlanNode) -> Tuple[Optional[PlanNode], List[int]]:
    """沿特征投影的输入向上穿过 Filter 找到等值连接"""
    filters = []
    current = plan.nodes[features.inputs[0]]
    while current.kind is NodeKind.FILTER:
        filters.append(current.id)
        current = plan.nodes[current.inputs[0]]
    if current.kind is NodeKind.EQUI_JOIN and current.params.get("combiner") == "concat":
        return current, filters
    return None, filters


def _referenced_columns(plan: Plan, exclude: int) -> set:
    """计划中（除 exclude 节点外）按名字引用的列：谓词、连接键、输出投影、分组列"""
    names = set()
    for node in plan.nodes.values():
        if node.id == exclude:
            continue
        if node.kind is NodeKind.FILTER:
            for predicate in node.params["predicates"]:
                names.add(predicate.column)
                if predicate.other_column:
                    names.add(predicate.other_column)
        elif node.kind is NodeKind.EQUI_JOIN:
            names.update(node.params.get("left_key", []))
            names.update(node.params.get("right_key", []))
        elif node.kind is NodeKind.PROJECT and node.params["mode"] == "output":
            names.update(node.params["columns"])
        elif node.kind is NodeKind.GROUP_AGGREGATE and node.params.get("group_by"):
            names.add(node.params["group_by"])
    return names


def pushdown_rewrite(plan: Plan, config: Union[EngineConfig, OptimizerConfig, None] = None) -> Plan:
    """
    模型分解下推：D × Wᵀ，D = D1 ⋈ D2  →  (D1 × W1ᵀ) ⋈ (D2 × W2ᵀ)，连接后按键把部分向量相加

    仅当首层输出宽度 h ≤ α·(f1+f2) 时改写；模式不存在或任一侧无特征时原样返回
    """
    _, opt = _optimizer_view(config)
    features_id = plan.meta.get("features")
    if not opt.pushdown_enabled or features_id is None or features_id not in plan.nodes:
        return plan
    features = plan.nodes[features_id]
    join, _ = _feature_join(plan, features)
    consumers = plan.consumers(features_id)
    if join is None or len(consumers) != 1:
        return plan
    matmul = plan.nodes[consumers[0]]
    if matmul.kind is not NodeKind.MATMUL or matmul.params.get("weight_cols") is not None:
        return plan
    widths, sides = features.params["widths"], features.params["sides"]
    f1 = sum(w for w, s in zip(widths, sides) if s == 0)
    f2 = sum(w for w, s in zip(widths, sides) if s == 1)
    h = matmul.params["u"]
    if f1 == 0 or f2 == 0:
        return plan
    if h > opt.pushdown_width_ratio * (f1 + f2):
        logger.info(f"🎯 不下推: 输出宽度 {h} > α·(f1+f2) = {opt.pushdown_width_ratio * (f1 + f2)}")
        return plan

    plan = plan.copy()
    features, join, matmul = plan.nodes[features_id], plan.nodes[join.id], plan.nodes[matmul.id]
    columns = features.params["columns"]
    referenced = _referenced_columns(plan, exclude=features_id)
    partial_sides = []
    offset = 0
    for side, (start, stop) in enumerate(((0, f1), (f1, f1 + f2))):
        branch = plan.nodes[join.inputs[side]]
        rows = branch.out_shape[0]
        picked = [i for i, s in enumerate(sides) if s == side]
        project = plan.add(NodeKind.PROJECT, {"mode": "features", "columns": [columns[i] for i in picked],
                                              "widths": [widths[i] for i in picked], "sides": [side] * len(picked)},
                           inputs=[branch.id], in_shapes=[branch.out_shape], out_shape=(rows, stop - start))
        params = dict(matmul.params, k=stop - start, weight_cols=(start, stop))
        partial = _add_linalg(plan, NodeKind.MATMUL, params, project.id, rows)
        # 已经乘进部分向量且下游不再引用的特征列不随连接传递
        drop = [columns[i] for i in picked if columns[i] not in referenced]
        attach = plan.add(NodeKind.PROJECT, {"mode": "attach_vector", "column": PARTIAL_COLUMN, "width": h,
                                             "drop": drop},
                          inputs=[branch.id, partial.id], in_shapes=[branch.out_shape, partial.out_shape],
                          out_shape=(rows, branch.out_shape[1] - len(drop) + 1))
        partial_sides.append(attach)
        offset = stop
    new_join = plan.add(NodeKind.EQUI_JOIN, dict(join.params, combiner="sum_partial", column=PARTIAL_COLUMN),
                        inputs=[a.id for a in partial_sides], in_shapes=[a.out_shape for a in partial_sides],
                        out_shape=(join.out_shape[0], sum(a.out_shape[1] for a in partial_sides) - 1))
    plan.rewire(join.id, new_join.id)
    plan.remove(join.id)
    rel_id = features.inputs[0]
    rel = plan.nodes[rel_id]
    extract = plan.add(NodeKind.PROJECT, {"mode": "extract_vector", "column": PARTIAL_COLUMN, "width": h},
                       inputs=[rel_id], in_shapes=[rel.out_shape], out_shape=matmul.out_shape)
    plan.rewire(matmul.id, extract.id)
    plan.remove(matmul.id)
    plan.remove(features.id)
    plan.meta["features"] = None
    plan.meta["pushdown"] = {"f1": f1, "f2": f2, "h": h}
    logger.info(f"🎯 下推改写: W({h}×{offset}) 拆分为 {h}×{f1} 与 {h}×{f2}")
    return plan


# ---- 表示选择 ----

def _relational_estimate(node: PlanNode, element_size: int) -> int:
    try:
        return estimate_memory(node, element_size=element_size)
    except PlanError:
        return 0


def _output_kind(node: PlanNode) -> Tuple[str, Optional[Tuple[int, int]]]:
    if node.kind is NodeKind.REBLOCK:
        return (node.params["to"], node.block)
    if node.kind in BLOCKABLE_KINDS and node.representation is Representation.RELATION:
        return ("blocked", node.block)
    if node.is_linalg:
        return ("dense", None)
    if node.kind is NodeKind.PROJECT and node.params["mode"] in ("features", "extract_vector"):
        return ("dense", None)
    if node.kind is NodeKind.EQUI_JOIN and node.params.get("combiner") == "block_matmul":
        return ("partials", node.block)
    if (node.kind is NodeKind.EQUI_JOIN and node.params.get("combiner") == "block_add_bias") or \
            (node.kind is NodeKind.GROUP_AGGREGATE and node.params["op"] == "block_sum") or \
            (node.kind is NodeKind.MAP_UDF and node.params["udf"] == "block_activation"):
        return ("blocked", node.block)
    if node.kind is NodeKind.MAP_UDF:
        return ("dense", None)
    return ("relation", None)


def _input_need(node: PlanNode, position: int, opt: OptimizerConfig) -> Tuple[str, Optional[Tuple[int, int]]]:
    if node.kind in BLOCKABLE_KINDS and node.representation is Representation.RELATION:
        if node.kind is NodeKind.MATMUL:
            return ("blocked", (opt.block_rows, opt.block_cols))
        if node.kind is NodeKind.ACTIVATION and node.params["kind"] == Activation.SOFTMAX.value:
            return ("blocked", (opt.block_rows, node.params["width"]))
        return ("blocked", None)
    if node.is_linalg:
        return ("dense", None)
    if node.kind is NodeKind.PROJECT and node.params["mode"] in ("attach", "attach_vector") and position == 1:
        return ("dense", None)
    if node.kind is NodeKind.MAP_UDF and node.params["udf"] == "fused_linalg":
        return ("dense", None)
    return ("relation", None)


def _insert_adapters(plan: Plan, opt: OptimizerConfig) -> None:
    """在稠密值与块矩阵相遇处插入 Reblock，并确定每个块矩阵输出的块大小"""
    for node_id in plan.topological():
        node = plan.nodes[node_id]
        for position, source_id in enumerate(list(node.inputs)):
            source = plan.nodes[source_id]
            have_kind, have_block = _output_kind(source)
            need_kind, need_block = _input_need(node, position, opt)
            if need_kind == "relation" or (have_kind == need_kind and need_block in (None, have_block)):
                continue
            target = (need_block or (opt.block_rows, opt.block_cols)) if need_kind == "blocked" else None
            width = source.out_shape[1]
            adapter = plan.add(NodeKind.REBLOCK, {"to": need_kind, "width": width}, inputs=[source_id],
                               in_shapes=[source.out_shape], out_shape=source.out_shape, block=target)
            adapter.est_bytes = _relational_estimate(adapter, opt.element_size_bytes)
            node.inputs[position] = adapter.id
            logger.debug(f"🔧 插入 Reblock {source_id} → {node_id}: {have_kind} → {need_kind} {target or ''}")
        if node.kind in BLOCKABLE_KINDS and node.representation is Representation.RELATION:
            if node.kind is NodeKind.MATMUL:
                node.block = (opt.block_rows, opt.block_cols)
            else:
                node.block = _output_kind(plan.nodes[node.inputs[0]])[1]


def select_representation(plan: Plan, config: Union[EngineConfig, OptimizerConfig, None] = None) -> Plan:
    """
    阈值规则：估计内存 > 阈值 → RELATION，否则 UDF；
    之后在稠密 ↔ 块矩阵的边界插入 Reblock
    """
    threshold, opt = _optimizer_view(config)
    plan = plan.copy()
    for node_id in plan.topological():
        node = plan.nodes[node_id]
        if node.is_linalg:
            node.est_bytes = estimate_memory(node, element_size=opt.element_size_bytes)
            node.representation = Representation.RELATION if node.est_bytes > threshold else Representation.UDF
            logger.info(f"🎯 节点 {node.id} {node.label} → {node.representation.value} (估计 {node.est_bytes} 字节)")
        elif node.kind is not NodeKind.MODEL_APPLY:
            node.est_bytes = _relational_estimate(node, opt.element_size_bytes)
    _insert_adapters(plan, opt)
    return plan


# ---- UDF 子图融合 ----

def _edge_bytes(node: PlanNode, element_size: int) -> int:
    return math.prod(node.out_shape) * element_size


def _expand_relational(plan: Plan, node: PlanNode) -> None:
    """RELATION 线性代数节点展开为连接 / 聚合 / 映射子计划"""
    common = dict(inputs=list(node.inputs), in_shapes=node.in_shapes, out_shape=node.out_shape,
                  representation=Representation.RELATION, est_bytes=node.est_bytes, block=node.block)
    if node.kind is NodeKind.MATMUL:
        join = plan.add(NodeKind.EQUI_JOIN, dict(node.params, combiner="block_matmul",
                                                 left_key=["block_col_id"], right_key=["block_row_id"]), **common)
        common.update(inputs=[join.id])
        last = plan.add(NodeKind.GROUP_AGGREGATE, {"op": "block_sum", "group_by": ["out_row", "out_col"],
                                                   "order_by": ["inner"]}, **common)
    elif node.kind is NodeKind.ADD_BIAS:
        last = plan.add(NodeKind.EQUI_JOIN, dict(node.params, combiner="block_add_bias",
                                                 left_key=["block_row_id", "block_col_id"],
                                                 right_key=["block_row_id", "block_col_id"]), **common)
    else:
        last = plan.add(NodeKind.MAP_UDF, dict(node.params, udf="block_activation"), **common)
    plan.rewire(node.id, last.id)
    plan.remove(node.id)


def _collapse(plan: Plan, chain: List[int]) -> PlanNode:
    members = [plan.nodes[nid] for nid in chain]
    first, last = members[0], members[-1]
    fused = plan.add(NodeKind.MAP_UDF, {"udf": "fused_linalg", "nodes": copy.deepcopy(members)},
                     inputs=list(first.inputs), in_shapes=first.in_shapes[:1], out_shape=last.out_shape,
                     representation=Representation.UDF, est_bytes=max(m.est_bytes for m in members))
    plan.rewire(last.id, fused.id)
    for nid in chain:
        plan.remove(nid)
    return fused


def fuse_udf_subgraphs(plan: Plan, config: Union[EngineConfig, OptimizerConfig, None] = None) -> Plan:
    """
    融合：从拓扑序中每个未访问的 UDF 线性代数节点出发，沿唯一消费者贪心扩展，
    要求内部边权（传递字节数）低于阈值、子图只有一条出边；每组折叠成一个 MapUDF。
    RELATION 节点展开为关系子计划
    """
    threshold, opt = _optimizer_view(config)
    plan = plan.copy()
    for node_id in plan.topological():
        node = plan.nodes[node_id]
        if node.kind in BLOCKABLE_KINDS and node.representation is Representation.RELATION:
            _expand_relational(plan, node)
    if not opt.fusion_enabled:
        return plan

    def fusible(n: PlanNode) -> bool:
        return n.is_linalg and n.representation is Representation.UDF

    visited = set()
    groups = 0
    for node_id in plan.topological():
        if node_id in visited or node_id not in plan.nodes or not fusible(plan.nodes[node_id]):
            continue
        chain = [node_id]
        while True:
            last = plan.nodes[chain[-1]]
            consumers = plan.consumers(last.id)
            if len(consumers) != 1:
                break
            candidate = plan.nodes[consumers[0]]
            if not fusible(candidate) or candidate.inputs != [last.id]:
                break
            if _edge_bytes(last, opt.element_size_bytes) >= threshold:
                break
            chain.append(candidate.id)
        visited.update(chain)
        _collapse(plan, chain)
        groups += 1
    logger.info(f"🔧 UDF 子图融合: {groups} 个融合 UDF")
    return plan


# ---- 降级 ----

@dataclass
class ExecutablePlan:
    """降级后的计划：节点与执行顺序固定，可被多个执行并发共享"""
    plan: Plan
    order: List[int]

    def explain(self) -> str:
        return self.plan.explain()


def lower_plan(plan: Plan) -> ExecutablePlan:
    """校验计划完全标注、无宏节点后给出拓扑执行顺序"""
    for node in plan.nodes.values():
        if node.kind is NodeKind.MODEL_APPLY:
            raise PlanError(f"node {node.id}: ModelApply must be expanded before lowering")
        if node.representation is Representation.UNASSIGNED:
            raise PlanError(f"node {node.id} ({node.kind.value}) has no representation")
    if plan.root is None or plan.root not in plan.nodes:
        raise PlanError("plan has no root")
    order = plan.topological()
    return ExecutablePlan(plan, order)


def optimize(plan: Plan, config: Union[EngineConfig, OptimizerConfig, None] = None) -> ExecutablePlan:
    """按固定顺序运行全部优化阶段"""
    plan = pushdown_rewrite(plan, config)
    plan = select_representation(plan, config)
    plan = fuse_udf_subgraphs(plan, config)
    return lower_plan(plan)
