#!/usr/bin/env python3
"""
计划执行器
按降级后的拓扑序执行节点：关系算子交给 relational_engine，线性代数算子交给
udfs 的执行核；推理结果缓存包裹从特征投影到模型输出的整段子图
"""

import logging
import operator
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Set, Tuple

import numpy as np

from buffer_pool import BufferPool, PooledBlockStore
from config import EngineConfig
from errors import CapacityError, InferDBError, LoadError, PlanError
from inference_cache import InferenceCache
from ir_optimizer import (BLOCKABLE_KINDS, ExecutablePlan, NodeKind, PlanNode, Representation,
                          estimate_memory)
from linalg_lowering import (HashIndex, PartialProducts, add_as_join, block_matmul_join,
                             embedding_relation, next_relation_id, reblock, release_blocked,
                             sum_partial_products, tile_bias, to_blocked)
from model_io import Catalog, Layer
from relational_engine import (Column, ColumnType, RowRelation, concat_combiner, equi_join,
                               filter_relation, group_aggregate)
from sql_parser import BoundPredicate
from tensor_core import BlockedMatrix, DenseTensor, TensorBlock, block_extent, grid_extent, reassemble
from udf_manager import invoke_udf
from udfs import coerce_predictions, run_blocked_node, run_dense_node

logger = logging.getLogger(__name__)

COUNT_COLUMN = "count"

_COMPARE: Dict[str, Callable[[Any, Any], Any]] = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


@dataclass
class ExecutionStats:
    """一次执行的统计"""
    node_seconds: Dict[int, float] = field(default_factory=dict)
    inference_calls: int = 0
    inference_rows: int = 0
    model_outputs: Optional[np.ndarray] = None


class ExecutionContext:
    """
    执行上下文：目录、缓冲池、配置、推理缓存

    同一个上下文可以被多次执行复用；权重的块划分按 (模型, 层, 列区间, 块大小) 缓存在缓冲池中
    """

    def __init__(self, catalog: Catalog, pool: Optional[BufferPool] = None,
                 config: Optional[EngineConfig] = None,
                 caches: Optional[Dict[str, InferenceCache]] = None):
        self.catalog = catalog
        self.pool = pool
        self.config = config or EngineConfig()
        self.caches = caches if caches is not None else {}
        self.stats = ExecutionStats()
        self._weights: Dict[Tuple, BlockedMatrix] = {}
        self._indexes: Dict[Tuple[str, int], Tuple[RowRelation, HashIndex]] = {}
        self._lock = threading.Lock()

    @property
    def block(self) -> Tuple[int, int]:
        opt = self.config.optimizer
        return (opt.block_rows, opt.block_cols)

    @property
    def workers(self) -> int:
        return self.config.workers

    def layer(self, model_name: str, index: int) -> Layer:
        model = self.catalog.models.get(model_name)
        if model is None:
            raise PlanError(f"unknown model {model_name!r}")
        if not model.weights_loaded:
            raise LoadError(f"model {model_name!r} has no weights; run load-model first", layer_index=index)
        return model.layers[index]

    def check_dense_cap(self, node: PlanNode, rows: int) -> None:
        """UDF 表示的节点在分配前检查稠密内存上限"""
        cap = self.config.dense_memory_cap_bytes
        if cap is None:
            return
        needed = estimate_memory(node, batch=rows, element_size=self.config.optimizer.element_size_bytes)
        if needed > cap:
            logger.error(f"❌ 稠密内存不足: 节点 {node.id} {node.label} 需要 {needed} 字节, 上限 {cap}")
            raise CapacityError(f"node {node.id} ({node.label}) needs {needed} bytes, dense memory cap is {cap}")

    def blocked_weight_t(self, params: Dict[str, Any], inner_block: int,
                         out_block: Optional[int] = None) -> BlockedMatrix:
        """稠密层权重的转置 Wᵀ（k × u）按 inner_block × out_block 分块"""
        out_block = out_block or self.config.optimizer.block_cols
        weight_cols = params.get("weight_cols")
        key = (params["model"], params["layer"], tuple(weight_cols) if weight_cols else None, inner_block, out_block)
        with self._lock:
            if key in self._weights:
                return self._weights[key]
            weights = self.layer(params["model"], params["layer"]).weights.data
            if weight_cols is not None:
                weights = weights[:, weight_cols[0]:weight_cols[1]]
            wt = weights.T
            rows, cols = wt.shape
            relation_id = next_relation_id("w")
            store = PooledBlockStore(self.pool, relation_id) if self.pool is not None else None
            blocks = {}
            for i in range(grid_extent(rows, inner_block)):
                for j in range(grid_extent(cols, out_block)):
                    r0, c0 = i * inner_block, j * out_block
                    block = np.ascontiguousarray(wt[r0:r0 + block_extent(i, rows, inner_block),
                                                    c0:c0 + block_extent(j, cols, out_block)])
                    if store is not None:
                        store.put((i, j), block)
                    else:
                        blocks[(i, j)] = block
            if store is None:
                matrix = BlockedMatrix.from_blocks(rows, cols, inner_block, out_block,
                                                   [TensorBlock(i, j, b) for (i, j), b in blocks.items()])
            else:
                matrix = BlockedMatrix(rows, cols, inner_block, out_block, store, relation_id)
            self._weights[key] = matrix
            logger.debug(f"📦 权重分块: {params['model']} 第 {params['layer']} 层 → {matrix}")
            return matrix

    def embedding_index(self, model_name: str, index: int) -> Tuple[RowRelation, HashIndex]:
        key = (model_name, index)
        with self._lock:
            if key not in self._indexes:
                rel = embedding_relation(self.layer(model_name, index).table)
                self._indexes[key] = (rel, HashIndex(rel, "row_id"))
            return self._indexes[key]

    def cache_for(self, model_name: str) -> Optional[InferenceCache]:
        if self.config.cache.mode == "off":
            return None
        with self._lock:
            if model_name not in self.caches:
                self.caches[model_name] = InferenceCache(self.config.cache)
            return self.caches[model_name]

    def close(self) -> None:
        """释放缓存在缓冲池中的权重块"""
        with self._lock:
            for matrix in self._weights.values():
                release_blocked(matrix)
            self._weights.clear()
            self._indexes.clear()


# ---- 关系算子 ----

def _qualified_scan(relation: RowRelation, table: str) -> RowRelation:
    schema = [Column(f"{table}.{c.name}", c.type, c.width) for c in relation.schema]
    columns = {f"{table}.{name}": values for name, values in relation.columns.items()}
    keys = [f"{table}.{k}" for k in relation.key_columns]
    return RowRelation(schema, columns, keys, validate=False)


def _predicate_mask(rel: RowRelation, predicates: List[BoundPredicate]) -> np.ndarray:
    mask = np.ones(len(rel), dtype=bool)
    for predicate in predicates:
        left = rel.values(predicate.column)
        right = rel.values(predicate.other_column) if predicate.other_column else predicate.value
        mask &= np.asarray(_COMPARE[predicate.op](left, right), dtype=bool)
    return mask


def _sum_partial_combiner(column: str):
    """下推连接的组合函数：两侧部分向量逐元素相加"""

    def combine(left: RowRelation, right: RowRelation) -> RowRelation:
        joined = concat_combiner(left, right)
        dropped = f"right.{column}"
        schema = [c for c in joined.schema if c.name != dropped]
        columns = {c.name: joined.columns[c.name] for c in schema}
        columns[column] = left.columns[column] + right.columns[column]
        return RowRelation(schema, columns, validate=False)

    return combine


def _feature_matrix(rel: RowRelation, columns: List[str]) -> np.ndarray:
    parts = []
    for name in columns:
        values = rel.values(name)
        if rel.column(name).type is ColumnType.VECTOR:
            parts.append(np.asarray(values, dtype=np.float64))
        else:
            parts.append(np.asarray(values, dtype=np.float64).reshape(-1, 1))
    if not parts:
        return np.empty((len(rel), 0), dtype=np.float64)
    return np.hstack(parts)


def _count(rel: RowRelation, group_by: Optional[str]) -> RowRelation:
    count_column = Column(COUNT_COLUMN, ColumnType.INT)
    if group_by is None:
        return RowRelation((count_column,), {COUNT_COLUMN: [len(rel)]})
    return group_aggregate(rel, [group_by], lambda acc, row: acc + 1, initial=0, output_column=count_column)


def _as_dense(value: Any) -> np.ndarray:
    if isinstance(value, BlockedMatrix):
        return reassemble(value).data
    return np.asarray(value, dtype=np.float64)


def _is_empty_tensor(value: Any) -> bool:
    return isinstance(value, np.ndarray) and value.ndim == 2 and value.shape[0] == 0


class PlanExecutor:
    """单次执行的调度器"""

    def __init__(self, executable: ExecutablePlan, context: ExecutionContext, feed: Any = None):
        self.executable = executable
        self.plan = executable.plan
        self.context = context
        self.feed = feed
        self.values: Dict[int, Any] = {}

    # ---- 节点处理 ----

    def _table_scan(self, node: PlanNode, inputs: List[Any]) -> Any:
        table = node.params["table"]
        if table is None:
            if self.feed is None:
                raise PlanError(f"node {node.id}: model plan needs a feature matrix to execute")
            return self.feed
        relation = self.context.catalog.tables[table].relation
        return _qualified_scan(relation, table) if node.params.get("qualify") else relation

    def _filter(self, node: PlanNode, inputs: List[Any]) -> RowRelation:
        predicates = node.params["predicates"]
        return filter_relation(inputs[0], lambda rel: _predicate_mask(rel, predicates), vectorized=True)

    def _equi_join(self, node: PlanNode, inputs: List[Any]) -> Any:
        combiner = node.params.get("combiner", "concat")
        ctx = self.context
        if combiner == "block_matmul":
            x = inputs[0]
            if _is_empty_tensor(x):
                return x
            weights_t = ctx.blocked_weight_t(node.params, x.block_cols, node.block[1] if node.block else None)
            return block_matmul_join(x, weights_t, ctx.pool, ctx.workers)
        if combiner == "block_add_bias":
            x = inputs[0]
            if _is_empty_tensor(x):
                return x
            layer = ctx.layer(node.params["model"], node.params["layer"])
            bias = tile_bias(layer.bias, x.logical_rows, x.block_rows, x.block_cols, ctx.pool)
            try:
                return add_as_join(x, bias, ctx.pool, ctx.workers)
            finally:
                release_blocked(bias)
        left, right = inputs
        if combiner == "sum_partial":
            return equi_join(left, right, node.params["left_key"], node.params["right_key"],
                             combiner=_sum_partial_combiner(node.params["column"]), workers=ctx.workers)
        return equi_join(left, right, node.params["left_key"], node.params["right_key"], workers=ctx.workers)

    def _project(self, node: PlanNode, inputs: List[Any]) -> Any:
        mode = node.params["mode"]
        if mode == "features":
            source = inputs[0]
            if isinstance(source, np.ndarray):
                return np.asarray(source, dtype=np.float64).reshape(len(source), node.out_shape[1])
            return _feature_matrix(source, node.params["columns"])
        if mode == "attach":
            rel, outputs = inputs[0], _as_dense(inputs[1])
            self.context.stats.model_outputs = outputs
            return rel.with_column(Column(node.params["column"], ColumnType.INT), coerce_predictions(outputs))
        if mode == "attach_vector":
            rel, partial = inputs[0], _as_dense(inputs[1])
            drop = set(node.params.get("drop", ()))
            if drop:
                rel = rel.project([name for name in rel.column_names if name not in drop])
            return rel.with_column(Column(node.params["column"], ColumnType.VECTOR, node.params["width"]),
                                   partial.reshape(len(rel), node.params["width"]))
        if mode == "extract_vector":
            values = inputs[0].values(node.params["column"])
            return np.asarray(values, dtype=np.float64).reshape(len(inputs[0]), node.params["width"])
        if mode == "output":
            return inputs[0].project(node.params["columns"])
        raise PlanError(f"node {node.id}: unknown projection mode {mode!r}")

    def _group_aggregate(self, node: PlanNode, inputs: List[Any]) -> Any:
        op = node.params["op"]
        if op == "count":
            return _count(inputs[0], node.params.get("group_by"))
        if op == "block_sum":
            partials = inputs[0]
            if _is_empty_tensor(partials):
                return partials
            return sum_partial_products(partials, self.context.pool, workers=self.context.workers)
        raise PlanError(f"node {node.id}: unknown aggregate {op!r}")

    def _map_udf(self, node: PlanNode, inputs: List[Any]) -> Any:
        udf = node.params["udf"]
        value = inputs[0]
        if _is_empty_tensor(value):
            return np.empty((0, node.out_shape[1]), dtype=np.float64)
        if udf == "fused_linalg":
            return invoke_udf(udf, nodes=node.params["nodes"], value=value, context=self.context)
        if udf == "block_activation":
            return invoke_udf(udf, kind=node.params["kind"], value=value, context=self.context)
        return invoke_udf(udf, value=value, context=self.context)

    def _linalg(self, node: PlanNode, inputs: List[Any]) -> Any:
        value = inputs[0]
        if _is_empty_tensor(value):
            return np.empty((0, node.out_shape[1]), dtype=np.float64)
        if node.kind in BLOCKABLE_KINDS and node.representation is Representation.RELATION:
            return run_blocked_node(node, value, self.context)
        return run_dense_node(node, _as_dense(value), self.context)

    def _reblock(self, node: PlanNode, inputs: List[Any]) -> Any:
        value = inputs[0]
        if _is_empty_tensor(value):
            return value
        if node.params["to"] == "dense":
            return _as_dense(value)
        block_rows, block_cols = node.block
        if isinstance(value, BlockedMatrix):
            return reblock(value, block_rows, block_cols, self.context.pool)
        return to_blocked(DenseTensor(value), block_rows, block_cols, self.context.pool)

    def _handler(self, node: PlanNode) -> Callable[[PlanNode, List[Any]], Any]:
        handlers = {
            NodeKind.TABLE_SCAN: self._table_scan,
            NodeKind.FILTER: self._filter,
            NodeKind.EQUI_JOIN: self._equi_join,
            NodeKind.PROJECT: self._project,
            NodeKind.GROUP_AGGREGATE: self._group_aggregate,
            NodeKind.MAP_UDF: self._map_udf,
            NodeKind.REBLOCK: self._reblock,
        }
        if node.is_linalg:
            return self._linalg
        if node.kind not in handlers:
            raise PlanError(f"node {node.id}: no executor for {node.kind.value}")
        return handlers[node.kind]

    def _run_node(self, node: PlanNode, values: Dict[int, Any]) -> Any:
        started = time.perf_counter()
        result = self._handler(node)(node, [values[i] for i in node.inputs])
        elapsed = time.perf_counter() - started
        stats = self.context.stats
        stats.node_seconds[node.id] = stats.node_seconds.get(node.id, 0.0) + elapsed
        return result

    # ---- 中间结果释放 ----

    def _release(self, value: Any, live: Dict[int, Any]) -> None:
        if not isinstance(value, (BlockedMatrix, PartialProducts)):
            return
        if any(other is value for other in live.values()):
            return
        if isinstance(value, BlockedMatrix):
            release_blocked(value)

    def _run_nodes(self, order: List[int], values: Dict[int, Any], keep: Set[int]) -> None:
        remaining = {nid: 0 for nid in order}
        for nid in order:
            for source in self.plan.nodes[nid].inputs:
                if source in remaining:
                    remaining[source] += 1
        for nid in order:
            node = self.plan.nodes[nid]
            values[nid] = self._run_node(node, values)
            for source in node.inputs:
                if source not in remaining:
                    continue
                remaining[source] -= 1
                if remaining[source] == 0 and source not in keep:
                    value = values.pop(source)
                    self._release(value, values)

    # ---- 模型段与缓存 ----

    def _model_segment(self) -> Tuple[Optional[int], Optional[int], List[int]]:
        meta = self.plan.meta
        features, attach = meta.get("features"), meta.get("attach")
        if features is None or attach is None or features not in self.plan.nodes or attach not in self.plan.nodes:
            return None, None, []
        sink = self.plan.nodes[attach].inputs[1]
        upstream = self.plan.ancestors(sink) | {sink}
        downstream = self._descendants(features)
        members = [nid for nid in self.executable.order if nid in upstream and nid in downstream]
        return features, sink, members

    def _descendants(self, node_id: int) -> Set[int]:
        seen, stack = set(), [node_id]
        while stack:
            for consumer in self.plan.consumers(stack.pop()):
                if consumer not in seen:
                    seen.add(consumer)
                    stack.append(consumer)
        return seen

    def _run_segment(self, features_id: int, sink: int, members: List[int], features: np.ndarray) -> np.ndarray:
        stats = self.context.stats
        if len(features):
            stats.inference_calls += 1
            stats.inference_rows += len(features)
        values = {features_id: features}
        self._run_nodes(members, values, keep={sink})
        return _as_dense(values[sink])

    def run(self) -> Any:
        features_id, sink, members = self._model_segment()
        model_name = self.plan.meta.get("model")
        cache = self.context.cache_for(model_name) if members and model_name else None
        segment = set(members)
        values: Dict[int, Any] = {}
        outer = [nid for nid in self.executable.order if nid not in segment]
        remaining = {nid: 0 for nid in self.executable.order}
        for nid in self.executable.order:
            for source in self.plan.nodes[nid].inputs:
                remaining[source] += 1
        root = self.plan.root

        for nid in outer:
            node = self.plan.nodes[nid]
            values[nid] = self._run_node(node, values)
            if nid == features_id and members:
                features = values[nid]

                def compute(batch: np.ndarray) -> np.ndarray:
                    return self._run_segment(features_id, sink, members, batch)

                if cache is not None:
                    values[sink] = cache.get_or_compute(features, compute)
                else:
                    values[sink] = compute(features)
                # 段内对特征的消费已经完成
                remaining[features_id] -= sum(self.plan.nodes[m].inputs.count(features_id) for m in members)
            for source in node.inputs:
                remaining[source] -= 1
                if remaining[source] == 0 and source != root and source in values:
                    self._release(values.pop(source), values)
            if nid == features_id and remaining[nid] == 0 and nid != root:
                values.pop(nid, None)
        return values[root]


def execute_plan(executable: ExecutablePlan, context: ExecutionContext, feed: Any = None) -> Any:
    """
    执行降级后的计划

    Args:
        executable: lower_plan 的结果
        context: 执行上下文
        feed: 模型计划（build_model_plan）的特征矩阵

    Returns:
        根节点的值：查询计划为 RowRelation，模型计划为 n × output_dim 的矩阵
    """
    try:
        result = PlanExecutor(executable, context, feed).run()
    except InferDBError:
        raise
    except MemoryError as e:
        raise CapacityError(f"allocation failed during execution: {e}")
    if isinstance(result, BlockedMatrix):
        dense = reassemble(result).data
        release_blocked(result)
        return dense
    return result
