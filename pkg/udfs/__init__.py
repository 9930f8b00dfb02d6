"""
内置 UDF 包
get_udf_manager() 首次调用时注册这里列出的全部 UDF
"""

from .linalg_kernels import block_activation_udf, fused_linalg_udf, run_blocked_node, run_dense_node
from .model_forward import UDF_METADATA as MODEL_FORWARD_METADATA
from .model_forward import coerce_predictions, model_forward_udf, scalar_forward

BUILTIN_UDFS = [
    MODEL_FORWARD_METADATA,
    {
        "name": "fused_linalg",
        "description": "融合的线性代数子图（按序执行成员节点）",
        "handler": fused_linalg_udf,
        "params_schema": {"nodes": {"type": "list"}, "value": {"type": "ndarray"}, "context": {"type": "object"}},
    },
    {
        "name": "block_activation",
        "description": "块矩阵逐块激活",
        "handler": block_activation_udf,
        "params_schema": {"kind": {"type": "string"}, "value": {"type": "BlockedMatrix"},
                          "context": {"type": "object"}},
    },
]

__all__ = ["BUILTIN_UDFS", "block_activation_udf", "coerce_predictions", "fused_linalg_udf",
           "model_forward_udf", "run_blocked_node", "run_dense_node", "scalar_forward"]
