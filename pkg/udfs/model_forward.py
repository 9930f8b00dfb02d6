#!/usr/bin/env python3
"""
模型前向 UDF
把整个模型的推理封装在一个 UDF 里，对一批特征行做稠密前向计算
"""

import logging
from typing import Any, Dict

import numpy as np

from errors import LoadError
from linalg_lowering import embedding_lookup_batch
from model_io import Conv2DLayer, DenseLayer, EmbeddingLayer, FlattenLayer, Model
from tensor_core import DenseTensor, activate_array, conv2d_dense

logger = logging.getLogger(__name__)


def model_forward_udf(model: Model, features: np.ndarray) -> np.ndarray:
    """
    对 n × input_dim 的特征批做前向计算

    Args:
        model: 已加载权重的模型
        features: 特征矩阵，卷积模型的每行按 (y, x, channel) 展开

    Returns:
        n × output_dim 的模型输出
    """
    if not model.weights_loaded:
        raise LoadError(f"model {model.name} has no weights; run load-model first")
    x = np.asarray(features, dtype=np.float64)
    if len(x) == 0:
        return np.empty((0, model.output_dim), dtype=np.float64)
    x = x.reshape(len(x), -1)
    chain = model.shape_chain()
    for index, layer in enumerate(model.layers):
        in_shape = chain[index]
        if isinstance(layer, DenseLayer):
            x = activate_array(x @ layer.weights.data.T + layer.bias.data, layer.activation)
        elif isinstance(layer, Conv2DLayer):
            rows = [conv2d_dense(DenseTensor(row.reshape(in_shape)), layer.kernels, layer.bias).data.reshape(-1)
                    for row in x]
            x = activate_array(np.vstack(rows), layer.activation)
        elif isinstance(layer, EmbeddingLayer):
            x = embedding_lookup_batch(layer.table, x, "UDF", layer.reduce)
        elif isinstance(layer, FlattenLayer):
            x = x.reshape(x.shape[0], -1)
    return x


def scalar_forward(model: Model, row: np.ndarray) -> np.ndarray:
    """单行前向（离线逐行对照用）"""
    return model_forward_udf(model, np.asarray(row, dtype=np.float64).reshape(1, -1))[0]


def coerce_predictions(outputs: np.ndarray) -> np.ndarray:
    """
    模型输出 → 预测标签

    单输出模型按 0.5 阈值得到 0/1，多输出模型取 argmax 类别下标；
    因此 predict(*) = True 对二分类模型表示类别 1
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.ndim == 1:
        outputs = outputs.reshape(-1, 1)
    if outputs.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    if outputs.shape[1] == 1:
        return (outputs[:, 0] >= 0.5).astype(np.int64)
    return np.argmax(outputs, axis=1).astype(np.int64)


UDF_METADATA: Dict[str, Any] = {
    "name": "model_forward",
    "description": "整模型前向计算（单个 UDF）",
    "handler": model_forward_udf,
    "params_schema": {
        "model": {"type": "Model", "required": True},
        "features": {"type": "ndarray", "required": True},
    },
}
