"""
引擎异常定义
每个异常都带有阶段标签（parse / bind / plan / execute / load / ingest / io / config）
"""

from typing import Optional


class InferDBError(Exception):
    """引擎异常基类"""

    default_phase = "execute"

    def __init__(self, message: str, phase: Optional[str] = None):
        self.phase = phase or self.default_phase
        self.message = message
        super().__init__(f"[{self.phase}] {message}")


class InvalidArgumentError(InferDBError, ValueError):
    """参数不合法（形状不匹配、块大小为 0 等）"""


class CorruptRelationError(InferDBError):
    """块关系缺块或重复块"""


class CapacityError(InferDBError, MemoryError):
    """超出缓冲池预算或稠密内存上限"""


class BlockNotFoundError(InferDBError, KeyError):
    """缓冲池中不存在该页"""

    def __str__(self):
        return Exception.__str__(self)


class PlanError(InferDBError):
    default_phase = "plan"


class InvalidPlanError(PlanError):
    """计划结构违反算子约束（例如 softmax 跨块行）"""


class LoadError(InferDBError):
    """模型清单或权重加载失败"""

    default_phase = "load"

    def __init__(self, message: str, layer_index: Optional[int] = None, field: Optional[str] = None):
        self.layer_index = layer_index
        self.field = field
        if layer_index is not None:
            location = f"layer {layer_index}" + (f" field '{field}'" if field else "")
            message = f"{location}: {message}"
        super().__init__(message)


class ParseError(InferDBError):
    """SQL 语法错误，带行列位置"""

    default_phase = "parse"

    def __init__(self, message: str, line: int = 1, column: int = 1, token_index: int = 0):
        self.line = line
        self.column = column
        self.token_index = token_index
        super().__init__(f"{message} at line {line}:{column} (token {token_index})")


class BindError(InferDBError):
    default_phase = "bind"


class IngestError(InferDBError):
    """CSV 导入失败，带行号"""

    default_phase = "ingest"

    def __init__(self, message: str, row_number: Optional[int] = None):
        self.row_number = row_number
        if row_number is not None:
            message = f"row {row_number}: {message}"
        super().__init__(message)


class BenchIOError(InferDBError, OSError):
    default_phase = "io"


class SpillDirLockedError(InferDBError):
    default_phase = "io"
