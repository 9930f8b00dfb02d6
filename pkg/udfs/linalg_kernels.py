#!/usr/bin/env python3
"""
线性代数节点的执行核
稠密路径调用 tensor_core，块路径调用 linalg_lowering；融合 UDF 按顺序执行成员节点
"""

import logging
from typing import Any, List

import numpy as np

from linalg_lowering import (activation_as_map, add_as_join, conv2d_lowered, embedding_lookup_batch,
                             matmul_as_join_agg, tile_bias)
from tensor_core import (Activation, BlockedMatrix, DenseTensor, apply_activation, dense_add,
                         dense_matmul_bt)

logger = logging.getLogger(__name__)


def weight_slice(layer, weight_cols) -> np.ndarray:
    """稠密层权重（units × in），下推改写后只取列区间"""
    weights = layer.weights.data
    if weight_cols is None:
        return weights
    start, stop = weight_cols
    return weights[:, start:stop]


def run_dense_node(node, x: np.ndarray, context) -> np.ndarray:
    """
    在稠密值上执行一个线性代数节点

    Args:
        node: PlanNode（MatMul / AddBias / Activation / Conv2D / Flatten / EmbeddingLookup）
        x: n × width 的 float64 矩阵
        context: 执行上下文（权重、缓冲池、块大小、稠密内存上限）
    """
    kind = node.kind.value
    out_width = node.out_shape[1]
    rows = x.shape[0]
    if rows == 0:
        return np.empty((0, out_width), dtype=np.float64)
    if node.representation.value == "UDF":
        context.check_dense_cap(node, rows)
    params = node.params
    if kind == "Flatten":
        return x
    if kind == "Activation":
        return apply_activation(DenseTensor(x), params["kind"]).data
    layer = context.layer(params["model"], params["layer"])
    if kind == "MatMul":
        return dense_matmul_bt(DenseTensor(x), DenseTensor(weight_slice(layer, params.get("weight_cols")))).data
    if kind == "AddBias":
        return dense_add(DenseTensor(x), layer.bias).data
    if kind == "Conv2D":
        images = DenseTensor(x.reshape(rows, params["height"], params["width"], params["channels"]))
        out = conv2d_lowered(images, layer.kernels, layer.bias, node.representation.value,
                             *context.block, pool=context.pool, workers=context.workers)
        return out.data.reshape(rows, -1)
    if kind == "EmbeddingLookup":
        index = context.embedding_index(params["model"], params["layer"]) \
            if node.representation.value == "RELATION" else None
        return embedding_lookup_batch(layer.table, x, node.representation.value, params["reduce"], index=index)
    raise ValueError(f"no dense kernel for {kind}")


def run_blocked_node(node, x: BlockedMatrix, context) -> BlockedMatrix:
    """在块矩阵上执行 RELATION 表示的 MatMul / AddBias / Activation"""
    kind = node.kind.value
    params = node.params
    if kind == "Activation":
        return activation_as_map(x, params["kind"], context.pool)
    layer = context.layer(params["model"], params["layer"])
    if kind == "MatMul":
        weights_t = context.blocked_weight_t(params, x.block_cols)
        return matmul_as_join_agg(x, weights_t, context.pool, context.workers)
    if kind == "AddBias":
        bias = tile_bias(layer.bias, x.logical_rows, x.block_rows, x.block_cols, context.pool)
        return add_as_join(x, bias, context.pool, context.workers)
    raise ValueError(f"no block kernel for {kind}")


def fused_linalg_udf(nodes: List[Any], value: np.ndarray, context) -> np.ndarray:
    """融合模型 UDF：对整批特征依次执行成员节点"""
    for node in nodes:
        value = run_dense_node(node, value, context)
    return value


def block_activation_udf(kind: str, value: BlockedMatrix, context) -> BlockedMatrix:
    return activation_as_map(value, Activation.parse(kind), context.pool)
