#!/usr/bin/env python3
"""
稠密张量与块矩阵
提供 UDF 表示下的稠密算子（矩阵乘、加偏置、激活函数、空间重写卷积）
以及块划分 / 块重组
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, Iterator, Optional, Protocol, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import CorruptRelationError, InvalidArgumentError

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 1000
BlockKey = Tuple[int, int]


def _frozen(array: np.ndarray) -> np.ndarray:
    """返回只读的 float64 行主序视图"""
    array = np.ascontiguousarray(array, dtype=np.float64).view()
    array.flags.writeable = False
    return array


class DenseTensor:
    """行主序 float64 张量，1~4 维"""

    __slots__ = ("data",)

    def __init__(self, data: Union[np.ndarray, list, float]):
        array = np.asarray(data, dtype=np.float64)
        if array.ndim < 1 or array.ndim > 4:
            raise InvalidArgumentError(f"tensor rank must be 1..4, got {array.ndim}")
        if any(dim < 1 for dim in array.shape):
            raise InvalidArgumentError(f"tensor dimensions must be >= 1, got {array.shape}")
        self.data = _frozen(array)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def reshape(self, *shape: int) -> "DenseTensor":
        return DenseTensor(self.data.reshape(*shape))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape})"


@dataclass(frozen=True)
class TensorBlock:
    """块关系中的一个元组：(block_row_id, block_col_id, block_data)"""
    block_row_id: int
    block_col_id: int
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise InvalidArgumentError(f"block payload must be a non-empty matrix, got {self.data.shape}")
        object.__setattr__(self, "data", _frozen(self.data))

    @property
    def key(self) -> BlockKey:
        return (self.block_row_id, self.block_col_id)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


class BlockStore(Protocol):
    """块存储接口：内存字典或缓冲池"""

    def get(self, key: BlockKey) -> np.ndarray: ...

    def keys(self) -> Iterable[BlockKey]: ...


class MemoryBlockStore:
    """内存中的块存储"""

    def __init__(self, blocks: Optional[Dict[BlockKey, np.ndarray]] = None):
        self._blocks: Dict[BlockKey, np.ndarray] = dict(blocks or {})

    def get(self, key: BlockKey) -> np.ndarray:
        if key not in self._blocks:
            raise CorruptRelationError(f"missing block {key}")
        return self._blocks[key]

    def put(self, key: BlockKey, block: np.ndarray) -> None:
        self._blocks[key] = _frozen(block)

    def keys(self) -> Iterable[BlockKey]:
        return list(self._blocks.keys())

    def release(self) -> None:
        self._blocks.clear()


def grid_extent(logical: int, block: int) -> int:
    return -(-logical // block)


def block_extent(index: int, logical: int, block: int) -> int:
    """第 index 个块在该维上的真实大小（边缘块可能更小）"""
    return min(block, logical - index * block)


class BlockedMatrix:
    """
    以 (block_row_id, block_col_id, block_data) 元组集合表示的矩阵

    网格必须完整：ceil(rows/block_rows) × ceil(cols/block_cols) 个块，
    边缘块按真实大小存储，全零块也显式存储
    """

    def __init__(self, logical_rows: int, logical_cols: int, block_rows: int, block_cols: int,
                 store: BlockStore, relation_id: str = ""):
        if block_rows <= 0 or block_cols <= 0:
            raise InvalidArgumentError(f"block size must be positive, got {block_rows}x{block_cols}")
        self.logical_rows = logical_rows
        self.logical_cols = logical_cols
        self.block_rows = block_rows
        self.block_cols = block_cols
        self.store = store
        self.relation_id = relation_id

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return (grid_extent(self.logical_rows, self.block_rows),
                grid_extent(self.logical_cols, self.block_cols))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.logical_rows, self.logical_cols)

    def expected_block_shape(self, key: BlockKey) -> Tuple[int, int]:
        return (block_extent(key[0], self.logical_rows, self.block_rows),
                block_extent(key[1], self.logical_cols, self.block_cols))

    def grid_keys(self) -> Iterator[BlockKey]:
        """按行主序遍历网格坐标"""
        grid_rows, grid_cols = self.grid_shape
        for i in range(grid_rows):
            for j in range(grid_cols):
                yield (i, j)

    def get_block(self, i: int, j: int) -> TensorBlock:
        return TensorBlock(i, j, self.store.get((i, j)))

    def blocks(self) -> Iterator[TensorBlock]:
        for i, j in self.grid_keys():
            yield self.get_block(i, j)

    @classmethod
    def from_blocks(cls, logical_rows: int, logical_cols: int, block_rows: int, block_cols: int,
                    blocks: Iterable[TensorBlock], relation_id: str = "") -> "BlockedMatrix":
        """由块元组构造内存块矩阵，重复块视为损坏"""
        payload: Dict[BlockKey, np.ndarray] = {}
        for block in blocks:
            if block.key in payload:
                raise CorruptRelationError(f"duplicate block {block.key}")
            payload[block.key] = block.data
        return cls(logical_rows, logical_cols, block_rows, block_cols, MemoryBlockStore(payload), relation_id)

    def validate(self) -> None:
        """检查网格完整性与每个块的尺寸"""
        expected = set(self.grid_keys())
        present = list(self.store.keys())
        if len(present) != len(set(present)):
            raise CorruptRelationError("duplicate block keys in relation")
        missing = expected - set(present)
        if missing:
            raise CorruptRelationError(f"missing blocks {sorted(missing)[:5]}")
        extra = set(present) - expected
        if extra:
            raise CorruptRelationError(f"blocks outside the grid {sorted(extra)[:5]}")

    def __repr__(self) -> str:
        return (f"BlockedMatrix({self.logical_rows}x{self.logical_cols}, "
                f"block={self.block_rows}x{self.block_cols}, grid={self.grid_shape})")


def block_partition(t: DenseTensor, block_rows: int, block_cols: int) -> BlockedMatrix:
    """
    把二维稠密张量切分为块矩阵

    Args:
        t: 二维张量
        block_rows: 块行数
        block_cols: 块列数

    Returns:
        网格完整的内存块矩阵，块数据与原区域逐位相同
    """
    if block_rows <= 0 or block_cols <= 0:
        raise InvalidArgumentError(f"block size must be positive, got {block_rows}x{block_cols}")
    if t.rank != 2:
        raise InvalidArgumentError(f"block_partition needs a rank-2 tensor, got rank {t.rank}")
    rows, cols = t.shape
    payload: Dict[BlockKey, np.ndarray] = {}
    for i in range(grid_extent(rows, block_rows)):
        for j in range(grid_extent(cols, block_cols)):
            region = t.data[i * block_rows:(i + 1) * block_rows, j * block_cols:(j + 1) * block_cols]
            payload[(i, j)] = _frozen(region.copy())
    return BlockedMatrix(rows, cols, block_rows, block_cols, MemoryBlockStore(payload))


def reassemble(m: BlockedMatrix) -> DenseTensor:
    """块矩阵重组为稠密张量（block_partition 的逆）"""
    m.validate()
    out = np.empty((m.logical_rows, m.logical_cols), dtype=np.float64)
    for i, j in m.grid_keys():
        block = m.store.get((i, j))
        if block.shape != m.expected_block_shape((i, j)):
            raise CorruptRelationError(
                f"block {(i, j)} has shape {block.shape}, expected {m.expected_block_shape((i, j))}")
        out[i * m.block_rows:i * m.block_rows + block.shape[0],
            j * m.block_cols:j * m.block_cols + block.shape[1]] = block
    return DenseTensor(out)


def dense_matmul(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """标准矩阵乘 a × b，float64 累加"""
    if a.rank != 2 or b.rank != 2:
        raise InvalidArgumentError(f"dense_matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return DenseTensor(np.matmul(a.data, b.data))


def dense_matmul_bt(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """a × bᵀ，稠密层 X·Wᵀ 的形式"""
    if a.rank != 2 or b.rank != 2:
        raise InvalidArgumentError(f"dense_matmul_bt needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgumentError(f"inner dimensions differ: {a.shape} x {b.shape}ᵀ")
    return DenseTensor(np.matmul(a.data, b.data.T))


def dense_add(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """逐元素相加；b 为行向量时对 a 的每一行广播（偏置）"""
    if a.shape == b.shape:
        return DenseTensor(a.data + b.data)
    if a.rank == 2 and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1])):
        return DenseTensor(a.data + b.data.reshape(1, -1))
    raise InvalidArgumentError(f"cannot add shapes {a.shape} and {b.shape}")


class Activation(str, Enum):
    """激活函数种类"""
    RELU = "relu"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, kind: Union[str, "Activation"]) -> "Activation":
        try:
            return cls(kind)
        except ValueError:
            raise InvalidArgumentError(f"unknown activation {kind!r}")


def activate_array(x: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(x, 0.0)
    if kind is Activation.SIGMOID:
        with np.errstate(over="ignore"):
            return 1.0 / (1.0 + np.exp(-x))
    if kind is Activation.SOFTMAX:
        shifted = x - x.max(axis=-1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=-1, keepdims=True)
    return x


def apply_activation(t: DenseTensor, kind: Union[str, Activation]) -> DenseTensor:
    """对张量应用激活函数；softmax 按行计算并先减去行最大值"""
    kind = Activation.parse(kind)
    if kind is Activation.SOFTMAX and t.rank != 2:
        raise InvalidArgumentError(f"softmax needs a rank-2 tensor, got {t.shape}")
    if kind is Activation.IDENTITY:
        return t
    return DenseTensor(activate_array(t.data, kind))


def _receptive_fields(images: np.ndarray, kernel_h: int, kernel_w: int) -> np.ndarray:
    # images: n×H×W×C -> n×oh×ow×(kh·kw·C)，顺序 (dy, dx, channel)
    windows = sliding_window_view(images, (kernel_h, kernel_w), axis=(1, 2))
    # windows: n×oh×ow×C×kh×kw
    n, oh, ow, channels = windows.shape[:4]
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n, oh, ow, kernel_h * kernel_w * channels)


def _check_kernel(shape: Tuple[int, ...], kernel_h: int, kernel_w: int) -> None:
    if kernel_h < 1 or kernel_w < 1:
        raise InvalidArgumentError(f"kernel size must be positive, got {kernel_h}x{kernel_w}")
    if kernel_h > shape[0] or kernel_w > shape[1]:
        raise InvalidArgumentError(f"kernel {kernel_h}x{kernel_w} larger than image {shape[0]}x{shape[1]}")


def spatial_rewrite(image: DenseTensor, kernel_h: int, kernel_w: int) -> DenseTensor:
    """
    空间重写：把卷积感受野展开为矩阵 F

    Args:
        image: H×W×C 图像（通道在最后）
        kernel_h: 卷积核高
        kernel_w: 卷积核宽

    Returns:
        F，形状 (H-kh+1)(W-kw+1) × (kh·kw·C + 1)，末列为 1.0（偏置列），
        行按输出位置 y 优先排列
    """
    if image.rank != 3:
        raise InvalidArgumentError(f"spatial_rewrite needs an H×W×C image, got {image.shape}")
    _check_kernel(image.shape, kernel_h, kernel_w)
    return spatial_rewrite_batch(DenseTensor(image.data[np.newaxis]), kernel_h, kernel_w)


def spatial_rewrite_batch(images: DenseTensor, kernel_h: int, kernel_w: int) -> DenseTensor:
    """批量空间重写：n 张图像的 F 矩阵按图像顺序纵向堆叠"""
    if images.rank != 4:
        raise InvalidArgumentError(f"spatial_rewrite_batch needs n×H×W×C images, got {images.shape}")
    _check_kernel(images.shape[1:], kernel_h, kernel_w)
    fields = _receptive_fields(images.data, kernel_h, kernel_w)
    rows = fields.reshape(-1, fields.shape[-1])
    ones = np.ones((rows.shape[0], 1), dtype=np.float64)
    return DenseTensor(np.hstack([rows, ones]))


def kernel_flatten(kernels: DenseTensor, bias: DenseTensor) -> DenseTensor:
    """
    卷积核展开为矩阵 K：每行是一个输出通道的权重（与 F 同序）加末列偏置

    Args:
        kernels: outC×kh×kw×C
        bias: 长度 outC
    """
    if kernels.rank != 4:
        raise InvalidArgumentError(f"kernels must be outC×kh×kw×C, got {kernels.shape}")
    out_channels = kernels.shape[0]
    if bias.rank != 1 or bias.shape[0] != out_channels:
        raise InvalidArgumentError(f"bias length {bias.shape} does not match {out_channels} kernels")
    weights = kernels.data.reshape(out_channels, -1)
    return DenseTensor(np.hstack([weights, bias.data.reshape(-1, 1)]))


def conv_output_shape(height: int, width: int, kernel_h: int, kernel_w: int, out_channels: int) -> Tuple[int, int, int]:
    return (height - kernel_h + 1, width - kernel_w + 1, out_channels)


def conv2d_dense(image: DenseTensor, kernels: DenseTensor, bias: DenseTensor) -> DenseTensor:
    """UDF 表示的卷积：reshape(F × Kᵀ) → (H-kh+1)×(W-kw+1)×outC"""
    _, kernel_h, kernel_w, channels = kernels.shape
    if image.rank != 3 or image.shape[2] != channels:
        raise InvalidArgumentError(f"image {image.shape} does not match kernel channels {channels}")
    f = spatial_rewrite(image, kernel_h, kernel_w)
    k = kernel_flatten(kernels, bias)
    out = dense_matmul_bt(f, k)
    return out.reshape(*conv_output_shape(image.shape[0], image.shape[1], kernel_h, kernel_w, kernels.shape[0]))
