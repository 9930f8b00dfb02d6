#!/usr/bin/env python3
"""
关系引擎
行关系（按列存储）以及等值连接、分组聚合、过滤、映射 UDF 算子
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import InferDBError, InvalidArgumentError

logger = logging.getLogger(__name__)

ROW_BATCH_SIZE = 4096


class ColumnType(str, Enum):
    """列类型"""
    INT = "int"
    FLOAT = "float"
    STRING = "string"
    VECTOR = "vector"  # 定长 float64 向量列，例如部分乘积 h 向量

    @property
    def numeric(self) -> bool:
        return self in (ColumnType.INT, ColumnType.FLOAT, ColumnType.VECTOR)


@dataclass(frozen=True)
class Column:
    name: str
    type: ColumnType
    width: int = 1  # VECTOR 列的向量长度

    def __post_init__(self):
        object.__setattr__(self, "type", ColumnType(self.type))


class UdfError(InferDBError):
    """UDF 在某一行上执行失败"""

    def __init__(self, message: str, row_index: int):
        self.row_index = row_index
        super().__init__(f"udf failed at row {row_index}: {message}")


def _as_column_array(values: Any, column: Column, length: Optional[int] = None) -> np.ndarray:
    if column.type is ColumnType.INT:
        array = np.asarray(values, dtype=np.int64)
    elif column.type is ColumnType.FLOAT:
        array = np.asarray(values, dtype=np.float64)
    elif column.type is ColumnType.VECTOR:
        array = np.asarray(values, dtype=np.float64)
        if array.size == 0:
            array = array.reshape(0, column.width)
        if array.ndim != 2 or array.shape[1] != column.width:
            raise InvalidArgumentError(
                f"vector column {column.name} expects width {column.width}, got shape {array.shape}")
    else:
        values = list(values)
        array = np.empty(len(values), dtype=object)
        for index, value in enumerate(values):
            array[index] = value
    if length is not None and len(array) != length:
        raise InvalidArgumentError(f"column {column.name} has {len(array)} values, expected {length}")
    return array


class RowRelation:
    """
    行关系：有序模式 + 按列存储的元组

    - 每一行的元数与模式元数相同，值与声明类型一致
    - 声明了键列时，键在各行之间唯一
    """

    def __init__(self, schema: Sequence[Column], columns: Dict[str, np.ndarray],
                 key_columns: Sequence[str] = (), validate: bool = True):
        self.schema: Tuple[Column, ...] = tuple(schema)
        names = [c.name for c in self.schema]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"duplicate column names in schema {names}")
        self.key_columns: Tuple[str, ...] = tuple(key_columns)
        for key in self.key_columns:
            if key not in names:
                raise InvalidArgumentError(f"key column {key!r} not in schema")
        lengths = {len(columns[c.name]) for c in self.schema}
        if len(lengths) > 1:
            raise InvalidArgumentError(f"ragged columns: lengths {sorted(lengths)}")
        self._length = lengths.pop() if lengths else 0
        self.columns: Dict[str, np.ndarray] = {
            c.name: _as_column_array(columns[c.name], c, self._length) if validate else columns[c.name]
            for c in self.schema
        }
        self.pages = None  # 导入时写入缓冲池的数值列页（见 query_engine.ingest_csv）
        if validate and self.key_columns:
            self._check_keys_unique()

    def _check_keys_unique(self) -> None:
        seen = set()
        for key in zip(*(self.columns[k] for k in self.key_columns)):
            key = tuple(v.item() if hasattr(v, "item") else v for v in key)
            if key in seen:
                raise InvalidArgumentError(f"duplicate key {key} for key columns {self.key_columns}")
            seen.add(key)

    @classmethod
    def from_rows(cls, schema: Sequence[Column], rows: Sequence[Sequence[Any]],
                  key_columns: Sequence[str] = ()) -> "RowRelation":
        schema = tuple(schema)
        for index, row in enumerate(rows):
            if len(row) != len(schema):
                raise InvalidArgumentError(f"row {index} has arity {len(row)}, schema has {len(schema)}")
        columns = {}
        for position, column in enumerate(schema):
            values = [row[position] for row in rows]
            if column.type is ColumnType.STRING and any(not isinstance(v, str) for v in values):
                raise InvalidArgumentError(f"column {column.name} expects strings")
            columns[column.name] = values
        return cls(schema, columns, key_columns)

    @classmethod
    def empty(cls, schema: Sequence[Column], key_columns: Sequence[str] = ()) -> "RowRelation":
        return cls(schema, {c.name: [] for c in schema}, key_columns)

    def __len__(self) -> int:
        return self._length

    @property
    def column_names(self) -> List[str]:
        return [c.name for c in self.schema]

    def column(self, name: str) -> Column:
        for column in self.schema:
            if column.name == name:
                return column
        raise InvalidArgumentError(f"unknown column {name!r}; available: {self.column_names}")

    def values(self, name: str) -> np.ndarray:
        self.column(name)
        return self.columns[name]

    def rows(self) -> Iterator[Tuple[Any, ...]]:
        """逐行迭代（标量以 Python 值返回，向量列以 ndarray 返回）"""
        arrays = [self.columns[c.name] for c in self.schema]
        for index in range(self._length):
            yield tuple(_scalar(array[index]) for array in arrays)

    def take(self, indices: np.ndarray) -> "RowRelation":
        """按行号收集（保持给定顺序）"""
        indices = np.asarray(indices, dtype=np.int64)
        columns = {name: array[indices] for name, array in self.columns.items()}
        keys = self.key_columns if len(np.unique(indices)) == len(indices) else ()
        return RowRelation(self.schema, columns, keys, validate=False)

    def with_column(self, column: Column, values: Any) -> "RowRelation":
        if column.name in self.columns:
            raise InvalidArgumentError(f"column {column.name!r} already exists")
        columns = dict(self.columns)
        columns[column.name] = _as_column_array(values, column, self._length)
        return RowRelation(self.schema + (column,), columns, self.key_columns, validate=False)

    def project(self, names: Sequence[str]) -> "RowRelation":
        schema = [self.column(n) for n in names]
        keys = tuple(k for k in self.key_columns if k in names)
        if len(keys) != len(self.key_columns):
            keys = ()
        return RowRelation(schema, {n: self.columns[n] for n in names}, keys, validate=False)

    def batches(self, size: int = ROW_BATCH_SIZE) -> Iterator["RowRelation"]:
        for start in range(0, self._length, size):
            yield self.take(np.arange(start, min(start + size, self._length)))

    def __repr__(self) -> str:
        return f"RowRelation({len(self)} rows, columns={self.column_names})"


def _scalar(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    return value


def concat_relations(parts: Sequence[RowRelation], schema: Sequence[Column]) -> RowRelation:
    """按顺序拼接同模式关系"""
    schema = tuple(schema)
    if not parts:
        return RowRelation.empty(schema)
    columns = {}
    for column in schema:
        arrays = [p.columns[column.name] for p in parts]
        columns[column.name] = np.concatenate(arrays) if arrays else []
    return RowRelation(schema, columns, validate=False)


_COMPATIBLE = {
    ColumnType.INT: {ColumnType.INT, ColumnType.FLOAT},
    ColumnType.FLOAT: {ColumnType.INT, ColumnType.FLOAT},
    ColumnType.STRING: {ColumnType.STRING},
    ColumnType.VECTOR: set(),
}


def _check_join_keys(left: RowRelation, right: RowRelation, left_key: Sequence[str],
                     right_key: Sequence[str]) -> None:
    if len(left_key) != len(right_key) or not left_key:
        raise InvalidArgumentError(f"join keys must pair up: {left_key} vs {right_key}")
    for lk, rk in zip(left_key, right_key):
        lt, rt = left.column(lk).type, right.column(rk).type
        if rt not in _COMPATIBLE[lt]:
            raise InvalidArgumentError(f"join key type mismatch: {lk} ({lt.value}) vs {rk} ({rt.value})")


def _key_tuples(rel: RowRelation, names: Sequence[str]) -> List[Tuple[Any, ...]]:
    arrays = [rel.columns[n] for n in names]
    return [tuple(_scalar(a[i]) for a in arrays) for i in range(len(rel))]


def join_pairs(left: RowRelation, right: RowRelation, left_key: Sequence[str],
               right_key: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """
    哈希连接，返回匹配行号对

    输出顺序为规范顺序：按键排序，键相同时按左行号、再按右行号
    """
    _check_join_keys(left, right, left_key, right_key)
    build: Dict[Tuple[Any, ...], List[int]] = {}
    for index, key in enumerate(_key_tuples(right, right_key)):
        build.setdefault(key, []).append(index)
    matches = []
    for li, key in enumerate(_key_tuples(left, left_key)):
        for ri in build.get(key, ()):
            matches.append((key, li, ri))
    matches.sort(key=lambda m: (m[0], m[1], m[2]))
    left_idx = np.fromiter((m[1] for m in matches), dtype=np.int64, count=len(matches))
    right_idx = np.fromiter((m[2] for m in matches), dtype=np.int64, count=len(matches))
    return left_idx, right_idx


def concat_combiner(left: RowRelation, right: RowRelation) -> RowRelation:
    """默认组合：左列在前、右列在后；右侧重名列加 right. 前缀"""
    schema = list(left.schema)
    columns = dict(left.columns)
    for column in right.schema:
        name = column.name if column.name not in columns else f"right.{column.name}"
        schema.append(Column(name, column.type, column.width))
        columns[name] = right.columns[column.name]
    return RowRelation(schema, columns, validate=False)


JoinCombiner = Callable[[RowRelation, RowRelation], RowRelation]


def equi_join(left: RowRelation, right: RowRelation, left_key: Sequence[str], right_key: Sequence[str],
              combiner: Optional[JoinCombiner] = None, workers: int = 1,
              chunk_size: int = ROW_BATCH_SIZE) -> RowRelation:
    """
    等值连接

    Args:
        left / right: 输入关系
        left_key / right_key: 连接列
        combiner: 匹配对的纯函数；以按行对齐的左右关系批次调用，返回同长度的输出关系
        workers: 并行处理匹配对批次的线程数，不影响结果与顺序

    Returns:
        每个键相等的匹配对对应一行 combiner 输出，顺序为规范顺序
    """
    combiner = combiner or concat_combiner
    left_idx, right_idx = join_pairs(left, right, left_key, right_key)
    chunks = [(left_idx[s:s + chunk_size], right_idx[s:s + chunk_size])
              for s in range(0, len(left_idx), chunk_size)] or [(left_idx, right_idx)]

    def run(chunk):
        return combiner(left.take(chunk[0]), right.take(chunk[1]))

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(run, chunks))
    else:
        parts = [run(chunk) for chunk in chunks]
    logger.debug(f"🔗 等值连接 {len(left)} x {len(right)} → {len(left_idx)} 对")
    return concat_relations(parts, parts[0].schema)


def group_aggregate(rel: RowRelation, group_key: Sequence[str], reducer: Callable[[Any, Tuple], Any],
                    initial: Any, order_by: Sequence[str] = (), output_name: str = "agg",
                    output_column: Optional[Column] = None,
                    finalize: Optional[Callable[[Tuple, Any], Any]] = None,
                    workers: int = 1) -> RowRelation:
    """
    分组聚合

    每个不同的键输出一行；组内按 order_by 列升序（再按输入顺序）折叠，
    因此浮点求和在不同运行和不同线程数下逐位一致

    Args:
        reducer: (acc, row) -> acc，row 为输入行元组
        initial: 初值；可调用时每组调用一次得到初值
        finalize: (key, acc) -> 输出值
    """
    for name in list(group_key) + list(order_by):
        rel.column(name)
    groups: Dict[Tuple[Any, ...], List[int]] = {}
    for index, key in enumerate(_key_tuples(rel, group_key)):
        groups.setdefault(key, []).append(index)
    order_keys = _key_tuples(rel, order_by) if order_by else None
    all_rows = list(rel.rows())

    def fold(key):
        indices = groups[key]
        if order_keys is not None:
            indices = sorted(indices, key=lambda i: (order_keys[i], i))
        acc = initial() if callable(initial) else initial
        for i in indices:
            acc = reducer(acc, all_rows[i])
        return finalize(key, acc) if finalize else acc

    ordered = sorted(groups)
    if workers > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(fold, ordered))
    else:
        results = [fold(key) for key in ordered]

    schema = [rel.column(name) for name in group_key]
    out_column = output_column or Column(output_name, _infer_type(results))
    columns = {c.name: [k[p] for k in ordered] for p, c in enumerate(schema)}
    columns[out_column.name] = results
    return RowRelation(schema + [out_column], columns, key_columns=tuple(group_key))


def _infer_type(values: Sequence[Any]) -> ColumnType:
    if all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in values):
        return ColumnType.INT
    if all(isinstance(v, (int, float, np.integer, np.floating)) for v in values):
        return ColumnType.FLOAT
    return ColumnType.STRING


def filter_relation(rel: RowRelation, predicate: Callable, vectorized: bool = False) -> RowRelation:
    """
    选择：保留谓词为真的行，保持输入顺序

    Args:
        predicate: 行元组 -> bool；vectorized=True 时为 关系 -> 布尔掩码
    """
    if vectorized:
        mask = np.asarray(predicate(rel), dtype=bool)
        if mask.shape != (len(rel),):
            raise InvalidArgumentError(f"predicate mask has shape {mask.shape}, expected ({len(rel)},)")
    else:
        mask = np.fromiter((bool(predicate(row)) for row in rel.rows()), dtype=bool, count=len(rel))
    return rel.take(np.flatnonzero(mask))


def map_udf(rel: RowRelation, udf: Callable, out_schema: Optional[Sequence[Column]] = None,
            batch: bool = False) -> RowRelation:
    """
    映射 UDF：逐元素应用，保持顺序；引擎把 udf 视为不透明函数

    Args:
        udf: 行元组 -> 行元组；batch=True 时为 关系批次 -> 关系批次
        out_schema: 输出模式，默认与输入相同
    """
    out_schema = tuple(out_schema or rel.schema)
    if batch:
        parts = []
        for start, part in zip(range(0, len(rel), ROW_BATCH_SIZE), rel.batches()):
            try:
                parts.append(udf(part))
            except InferDBError:
                raise
            except Exception as e:
                logger.error(f"❌ UDF 执行失败: 批次起始行 {start} - {e}")
                raise UdfError(str(e), start) from e
        return concat_relations(parts, out_schema)
    rows = []
    for index, row in enumerate(rel.rows()):
        try:
            rows.append(tuple(udf(row)))
        except InferDBError:
            raise
        except Exception as e:
            logger.error(f"❌ UDF 执行失败: 第 {index} 行 - {e}")
            raise UdfError(str(e), index) from e
    return RowRelation.from_rows(out_schema, rows)
