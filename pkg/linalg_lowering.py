#!/usr/bin/env python3
"""
线性代数算子的两种表示
- UDF 表示：直接调用 tensor_core 的稠密算子
- 关系表示：把块矩阵看作 (block_row_id, block_col_id, block) 关系，
  矩阵乘 = 连接 + 聚合，矩阵加 = 连接，激活 = 逐块映射
"""

import itertools
import logging
import threading
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from buffer_pool import BufferPool, PooledBlockStore
from errors import InvalidArgumentError, InvalidPlanError
from relational_engine import (Column, ColumnType, RowRelation, equi_join, filter_relation,
                               group_aggregate, map_udf)
from tensor_core import (Activation, BlockedMatrix, DenseTensor, MemoryBlockStore, activate_array,
                         block_extent, block_partition, dense_matmul_bt, grid_extent, kernel_flatten,
                         reassemble, spatial_rewrite, spatial_rewrite_batch, conv_output_shape)

logger = logging.getLogger(__name__)

_relation_counter = itertools.count()
_counter_lock = threading.Lock()

BLOCK_KEY_SCHEMA = (Column("block_row_id", ColumnType.INT), Column("block_col_id", ColumnType.INT))
PARTIAL_SCHEMA = (Column("out_row", ColumnType.INT), Column("out_col", ColumnType.INT),
                  Column("inner", ColumnType.INT))


class RepresentationKind(str, Enum):
    UDF = "UDF"
    RELATION = "RELATION"


def next_relation_id(prefix: str) -> str:
    with _counter_lock:
        return f"{prefix}{next(_relation_counter)}"


def new_block_store(pool: Optional[BufferPool], relation_id: str):
    """缓冲池可用时块写入缓冲池，否则放在内存"""
    return PooledBlockStore(pool, relation_id) if pool is not None else MemoryBlockStore()


def block_key_relation(m: BlockedMatrix) -> RowRelation:
    """块矩阵的块坐标关系（行主序）"""
    keys = list(m.grid_keys())
    return RowRelation(BLOCK_KEY_SCHEMA, {
        "block_row_id": [k[0] for k in keys],
        "block_col_id": [k[1] for k in keys],
    }, key_columns=("block_row_id", "block_col_id"))


def to_blocked(t: DenseTensor, block_rows: int, block_cols: int, pool: Optional[BufferPool] = None,
               relation_id: Optional[str] = None) -> BlockedMatrix:
    """稠密 → 块；缓冲池存在时块驻留在缓冲池中"""
    blocked = block_partition(t, block_rows, block_cols)
    if pool is None:
        return blocked
    relation_id = relation_id or next_relation_id("blk")
    store = PooledBlockStore(pool, relation_id)
    for key in blocked.grid_keys():
        store.put(key, blocked.store.get(key))
    return BlockedMatrix(t.shape[0], t.shape[1], block_rows, block_cols, store, relation_id)


def _pin(m: BlockedMatrix, key: Tuple[int, int]) -> np.ndarray:
    store = m.store
    return store.pin(key) if hasattr(store, "pin") else store.get(key)


def _unpin(m: BlockedMatrix, key: Tuple[int, int]) -> None:
    if hasattr(m.store, "unpin"):
        m.store.unpin(key)


def _worker_budget(workers: int, pool: Optional[BufferPool], block_bytes: int) -> int:
    if pool is None:
        return workers
    return min(workers, pool.max_pinned_workers(block_bytes))


class PartialProducts:
    """连接阶段输出：每个匹配块对 (i, k, j) 的部分乘积"""

    def __init__(self, relation: RowRelation, pool: Optional[BufferPool], relation_id: str,
                 shape: Tuple[int, int], block: Tuple[int, int]):
        self.relation = relation
        self.pool = pool
        self.relation_id = relation_id
        self.shape = shape
        self.block = block
        self._memory: Dict[Tuple[int, int, int], np.ndarray] = {}

    def _pool_key(self, i: int, j: int, k: int):
        return (f"{self.relation_id}.k{k}", i, j)

    def put(self, i: int, j: int, k: int, block: np.ndarray) -> None:
        if self.pool is None:
            self._memory[(i, j, k)] = block
        else:
            self.pool.put(self._pool_key(i, j, k), block)

    def get(self, i: int, j: int, k: int) -> np.ndarray:
        if self.pool is None:
            return self._memory[(i, j, k)]
        return self.pool.get(self._pool_key(i, j, k))

    def release(self) -> None:
        if self.pool is None:
            self._memory.clear()
            return
        for i, j, k in self.relation.rows():
            self.pool.discard(self._pool_key(i, j, k))


def _check_matmul(a: BlockedMatrix, b: BlockedMatrix) -> None:
    if a.logical_cols != b.logical_rows:
        raise InvalidArgumentError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.block_cols != b.block_rows:
        raise InvalidArgumentError(
            f"inner partitioning differs: a.block_cols={a.block_cols}, b.block_rows={b.block_rows}")


def block_matmul_join(a: BlockedMatrix, b: BlockedMatrix, pool: Optional[BufferPool] = None,
                      workers: int = 1, relation_id: Optional[str] = None) -> PartialProducts:
    """连接阶段：A 块与 B 块按 A.block_col_id = B.block_row_id 连接，组合函数为块乘"""
    _check_matmul(a, b)
    relation_id = relation_id or next_relation_id("mm")
    partials = PartialProducts(None, pool, relation_id, (a.logical_rows, b.logical_cols),
                               (a.block_rows, b.block_cols))

    def multiply(left: RowRelation, right: RowRelation) -> RowRelation:
        out = {"out_row": [], "out_col": [], "inner": []}
        for i, k, k2, j in zip(left.columns["block_row_id"], left.columns["block_col_id"],
                               right.columns["block_row_id"], right.columns["block_col_id"]):
            i, k, j = int(i), int(k), int(j)
            a_block = _pin(a, (i, k))
            b_block = _pin(b, (k, j))
            try:
                product = np.matmul(a_block, b_block)
            finally:
                _unpin(a, (i, k))
                _unpin(b, (k, j))
            partials.put(i, j, k, product)
            out["out_row"].append(i)
            out["out_col"].append(j)
            out["inner"].append(k)
        return RowRelation(PARTIAL_SCHEMA, out)

    block_bytes = a.block_rows * max(a.block_cols, b.block_cols) * 8
    workers = _worker_budget(workers, pool, block_bytes)
    partials.relation = equi_join(block_key_relation(a), block_key_relation(b),
                                  ["block_col_id"], ["block_row_id"], combiner=multiply,
                                  workers=workers, chunk_size=1 if workers > 1 else 4096)
    return partials


def sum_partial_products(partials: PartialProducts, pool: Optional[BufferPool] = None,
                         relation_id: Optional[str] = None, workers: int = 1) -> BlockedMatrix:
    """聚合阶段：按 (out_row, out_col) 分组，按 inner 升序累加部分乘积"""
    relation_id = relation_id or next_relation_id("agg")
    store = new_block_store(pool, relation_id)

    def reducer(acc, row):
        i, j, k = row
        block = partials.get(i, j, k)
        return block if acc is None else acc + block

    def finalize(key, acc):
        store.put(key, acc)
        return int(acc.size)

    group_aggregate(partials.relation, ["out_row", "out_col"], reducer, initial=None,
                    order_by=["inner"], output_column=Column("elements", ColumnType.INT),
                    finalize=finalize, workers=_worker_budget(workers, pool, partials.block[0] * partials.block[1] * 8))
    partials.release()
    rows, cols = partials.shape
    return BlockedMatrix(rows, cols, partials.block[0], partials.block[1], store, relation_id)


def matmul_as_join_agg(a: BlockedMatrix, b: BlockedMatrix, pool: Optional[BufferPool] = None,
                       workers: int = 1) -> BlockedMatrix:
    """
    关系表示的矩阵乘：连接 + 聚合

    Args:
        a, b: 块矩阵，要求 a.block_cols == b.block_rows（内维划分一致）
        pool: 缓冲池；为 None 时块保存在内存
        workers: 并行线程数，不影响结果

    Returns:
        网格完整的结果块矩阵
    """
    partials = block_matmul_join(a, b, pool, workers)
    logger.debug(f"🔧 块矩阵乘: {a} x {b}, 部分乘积 {len(partials.relation)} 个")
    return sum_partial_products(partials, pool, workers=workers)


def _check_same_grid(a: BlockedMatrix, b: BlockedMatrix) -> None:
    if a.shape != b.shape or (a.block_rows, a.block_cols) != (b.block_rows, b.block_cols):
        raise InvalidArgumentError(
            f"grids differ: {a.shape}@{a.block_rows}x{a.block_cols} vs {b.shape}@{b.block_rows}x{b.block_cols}")


def add_as_join(a: BlockedMatrix, b: BlockedMatrix, pool: Optional[BufferPool] = None,
                workers: int = 1) -> BlockedMatrix:
    """关系表示的矩阵加：按 (block_row_id, block_col_id) 连接，组合函数为块加"""
    _check_same_grid(a, b)
    relation_id = next_relation_id("add")
    store = new_block_store(pool, relation_id)

    def add(left: RowRelation, right: RowRelation) -> RowRelation:
        for i, j in zip(left.columns["block_row_id"], left.columns["block_col_id"]):
            key = (int(i), int(j))
            store.put(key, _pin(a, key) + _pin(b, key))
            _unpin(a, key)
            _unpin(b, key)
        return left

    equi_join(block_key_relation(a), block_key_relation(b), ["block_row_id", "block_col_id"],
              ["block_row_id", "block_col_id"], combiner=add,
              workers=_worker_budget(workers, pool, a.block_rows * a.block_cols * 8))
    return BlockedMatrix(a.logical_rows, a.logical_cols, a.block_rows, a.block_cols, store, relation_id)


def tile_bias(bias: DenseTensor, rows: int, block_rows: int, block_cols: int,
              pool: Optional[BufferPool] = None) -> BlockedMatrix:
    """把偏置行向量平铺成与数据同网格的块矩阵"""
    if bias.rank != 1:
        raise InvalidArgumentError(f"bias must be a vector, got {bias.shape}")
    cols = bias.shape[0]
    relation_id = next_relation_id("bias")
    store = new_block_store(pool, relation_id)
    for i in range(grid_extent(rows, block_rows)):
        for j in range(grid_extent(cols, block_cols)):
            segment = bias.data[j * block_cols:j * block_cols + block_extent(j, cols, block_cols)]
            store.put((i, j), np.tile(segment, (block_extent(i, rows, block_rows), 1)))
    return BlockedMatrix(rows, cols, block_rows, block_cols, store, relation_id)


def activation_as_map(m: BlockedMatrix, kind: Union[str, Activation], pool: Optional[BufferPool] = None) -> BlockedMatrix:
    """
    关系表示的激活：逐块映射

    softmax 需要整行位于同一块内（block_cols >= logical_cols），否则需先 Reblock
    """
    kind = Activation.parse(kind)
    if kind is Activation.IDENTITY:
        return m
    if kind is Activation.SOFTMAX and m.block_cols < m.logical_cols:
        raise InvalidPlanError(
            f"softmax over rows split across blocks ({m.block_cols} < {m.logical_cols}); reblock first")
    relation_id = next_relation_id("act")
    store = new_block_store(pool, relation_id)

    def apply(row):
        key = (row[0], row[1])
        store.put(key, activate_array(m.store.get(key), kind))
        return row

    map_udf(block_key_relation(m), apply)
    return BlockedMatrix(m.logical_rows, m.logical_cols, m.block_rows, m.block_cols, store, relation_id)


def reblock(m: BlockedMatrix, block_rows: int, block_cols: int, pool: Optional[BufferPool] = None) -> BlockedMatrix:
    """按新的块大小重新切分（按输出块逐个拼装，不整体物化）"""
    if (block_rows, block_cols) == (m.block_rows, m.block_cols):
        return m
    relation_id = next_relation_id("rb")
    store = new_block_store(pool, relation_id)
    out = BlockedMatrix(m.logical_rows, m.logical_cols, block_rows, block_cols, store, relation_id)
    for i, j in out.grid_keys():
        r0, c0 = i * block_rows, j * block_cols
        rows, cols = out.expected_block_shape((i, j))
        block = np.empty((rows, cols), dtype=np.float64)
        for si in range(r0 // m.block_rows, (r0 + rows - 1) // m.block_rows + 1):
            for sj in range(c0 // m.block_cols, (c0 + cols - 1) // m.block_cols + 1):
                src = m.store.get((si, sj))
                sr0, sc0 = si * m.block_rows, sj * m.block_cols
                lo_r, hi_r = max(r0, sr0), min(r0 + rows, sr0 + src.shape[0])
                lo_c, hi_c = max(c0, sc0), min(c0 + cols, sc0 + src.shape[1])
                block[lo_r - r0:hi_r - r0, lo_c - c0:hi_c - c0] = src[lo_r - sr0:hi_r - sr0, lo_c - sc0:hi_c - sc0]
        store.put((i, j), block)
    return out


def release_blocked(m: BlockedMatrix) -> None:
    """释放缓冲池中的中间块"""
    if hasattr(m.store, "release"):
        m.store.release()


def conv2d_lowered(image: DenseTensor, kernels: DenseTensor, bias: DenseTensor,
                   representation: Union[str, RepresentationKind] = RepresentationKind.UDF,
                   block_rows: int = 1000, block_cols: int = 1000, pool: Optional[BufferPool] = None,
                   workers: int = 1) -> DenseTensor:
    """
    卷积降级为 F × Kᵀ

    Args:
        image: H×W×C 单张图像，或 n×H×W×C 批量
        kernels: outC×kh×kw×C
        bias: outC
        representation: UDF 直接稠密乘；RELATION 把 F、Kᵀ 切块后做连接 + 聚合

    Returns:
        (H-kh+1)×(W-kw+1)×outC（批量时前面多一个 n 维），通道在最后
    """
    representation = RepresentationKind(representation)
    out_channels, kernel_h, kernel_w, channels = kernels.shape
    batched = image.rank == 4
    if image.rank not in (3, 4) or image.shape[-1] != channels:
        raise InvalidArgumentError(f"image {image.shape} does not match kernel channels {channels}")
    f = spatial_rewrite_batch(image, kernel_h, kernel_w) if batched else spatial_rewrite(image, kernel_h, kernel_w)
    k = kernel_flatten(kernels, bias)
    if representation is RepresentationKind.UDF:
        product = dense_matmul_bt(f, k)
    else:
        f_blocked = to_blocked(f, block_rows, block_cols, pool)
        kt_blocked = to_blocked(DenseTensor(k.data.T), block_cols, block_cols, pool)
        out = matmul_as_join_agg(f_blocked, kt_blocked, pool, workers)
        product = reassemble(out)
        for blocked in (f_blocked, kt_blocked, out):
            release_blocked(blocked)
    height, width = image.shape[-3], image.shape[-2]
    out_shape = conv_output_shape(height, width, kernel_h, kernel_w, out_channels)
    if batched:
        return product.reshape(image.shape[0], *out_shape)
    return product.reshape(*out_shape)


class HashIndex:
    """等值列上的哈希索引：值 → 行号列表"""

    def __init__(self, rel: RowRelation, column: str):
        self.column = column
        self._positions: Dict[object, list] = {}
        for position, value in enumerate(rel.values(column)):
            self._positions.setdefault(value.item() if hasattr(value, "item") else value, []).append(position)

    def lookup(self, value) -> list:
        return self._positions.get(value, [])


def embedding_relation(table: Union[DenseTensor, BlockedMatrix]) -> RowRelation:
    """嵌入表的 (row_id, vector) 关系"""
    dense = reassemble(table) if isinstance(table, BlockedMatrix) else table
    rows, dim = dense.shape
    return RowRelation((Column("row_id", ColumnType.INT), Column("vector", ColumnType.VECTOR, dim)),
                       {"row_id": np.arange(rows), "vector": dense.data}, key_columns=("row_id",))


def _check_ids(ids: np.ndarray, dict_size: int) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and not np.all(np.equal(np.mod(ids, 1), 0)):
        raise InvalidArgumentError("embedding ids must be integers")
    ids = ids.astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= dict_size):
        raise InvalidArgumentError(f"embedding id out of range [0, {dict_size})")
    return ids


def embedding_lookup_batch(table: Union[DenseTensor, BlockedMatrix], id_matrix: np.ndarray,
                           representation: Union[str, RepresentationKind] = RepresentationKind.UDF,
                           reduce: str = "none", index: Optional[Tuple[RowRelation, HashIndex]] = None) -> np.ndarray:
    """
    批量嵌入查找，id_matrix 形状 n×L

    Returns:
        reduce="none" 时 n×(L·d)，reduce="sum" 时 n×d（按 id 顺序依次累加）
    """
    representation = RepresentationKind(representation)
    if reduce not in ("none", "sum"):
        raise InvalidArgumentError(f"unknown embedding reduce {reduce!r}")
    dict_size = table.shape[0]
    ids = _check_ids(np.atleast_2d(id_matrix), dict_size)
    n, length = ids.shape
    if length == 0:
        raise InvalidArgumentError("embedding lookup needs at least one id")
    if representation is RepresentationKind.UDF:
        dense = reassemble(table).data if isinstance(table, BlockedMatrix) else table.data
        gathered = [dense[ids[:, position]] for position in range(length)]
    else:
        rel, hash_index = index or (None, None)
        if rel is None:
            rel = embedding_relation(table)
            hash_index = HashIndex(rel, "row_id")
        vectors = rel.values("vector")
        gathered = []
        for position in range(length):
            # 选择：row_id = id 的等值谓词，经哈希索引定位
            rows = [filter_relation(rel.take(hash_index.lookup(int(i))), lambda row, i=int(i): row[0] == i)
                    for i in ids[:, position]]
            gathered.append(np.vstack([r.values("vector") for r in rows]) if rows else
                            np.empty((0, vectors.shape[1])))
    if reduce == "sum":
        acc = gathered[0]
        for part in gathered[1:]:
            acc = acc + part
        return acc
    return np.hstack(gathered) if gathered else np.empty((n, 0))


def embedding_lookup(table: Union[DenseTensor, BlockedMatrix], ids: Sequence[int],
                     representation: Union[str, RepresentationKind] = RepresentationKind.UDF,
                     reduce: str = "none") -> DenseTensor:
    """
    嵌入查找

    - UDF：按 id 直接取行（reduce=sum 时求和）
    - RELATION：在 (row_id, vector) 关系上做 row_id = id 的选择，哈希索引加速
    """
    ids = np.asarray(ids).reshape(1, -1)
    out = embedding_lookup_batch(table, ids, representation, reduce)
    if reduce == "sum":
        return DenseTensor(out[0])
    return DenseTensor(out.reshape(ids.shape[1], -1))
