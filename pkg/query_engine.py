#!/usr/bin/env python3
"""
查询引擎
会话管理（目录持久化、缓冲池、溢出目录锁、推理缓存）、CSV 导入和查询执行驱动
"""

import csv
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from buffer_pool import BufferPool, SpillDirLock
from config import EngineConfig, load_engine_config
from errors import IngestError, InferDBError, InvalidArgumentError
from inference_cache import InferenceCache
from ir_optimizer import ExecutablePlan, build_ir, build_model_plan, optimize
from model_io import Catalog, Model, TableEntry, create_model, get_catalog, load_model
from plan_executor import ExecutionContext, ExecutionStats, execute_plan
from relational_engine import ROW_BATCH_SIZE, Column, ColumnType, RowRelation
from report_formatter import format_relation, format_report
from sql_parser import bind_query, parse_query

logger = logging.getLogger(__name__)

CATALOG_FILE = "catalog.json"
_INT_RE = re.compile(r"^[+-]?\d+$")


# ---- CSV 导入 ----

def _parse_schema_option(schema: Union[None, str, Dict[str, str]]) -> Dict[str, ColumnType]:
    if not schema:
        return {}
    if isinstance(schema, str):
        pairs = {}
        for item in schema.split(","):
            name, _, kind = item.partition(":")
            if not kind:
                raise IngestError(f"schema entry {item!r} must look like name:type")
            pairs[name.strip()] = kind.strip()
        schema = pairs
    try:
        return {name: ColumnType(str(kind).lower()) for name, kind in schema.items()}
    except ValueError as e:
        raise IngestError(f"bad schema option: {e}")


def _parse_keys_option(keys: Union[None, str, Sequence[str]]) -> List[str]:
    if not keys:
        return []
    if isinstance(keys, str):
        return [k.strip() for k in keys.split(",") if k.strip()]
    return list(keys)


def _is_int(text: str) -> bool:
    return bool(_INT_RE.match(text.strip()))


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def infer_column_type(values: Sequence[str]) -> ColumnType:
    """全部能解析为整数 → int；否则全部能解析为浮点 → float；否则 string"""
    if all(_is_int(v) for v in values):
        return ColumnType.INT
    if all(_is_float(v) for v in values):
        return ColumnType.FLOAT
    return ColumnType.STRING


def _convert(values: List[str], column: Column, first_row: int) -> np.ndarray:
    if column.type is ColumnType.STRING:
        array = np.empty(len(values), dtype=object)
        for index, value in enumerate(values):
            array[index] = value
        return array
    converted = np.empty(len(values), dtype=np.int64 if column.type is ColumnType.INT else np.float64)
    for index, value in enumerate(values):
        try:
            if column.type is ColumnType.INT:
                if not _is_int(value):
                    raise ValueError(value)
                converted[index] = int(value)
            else:
                converted[index] = float(value)
        except ValueError:
            raise IngestError(f"column {column.name}: cannot parse {value!r} as {column.type.value}",
                              row_number=first_row + index)
    return converted


def read_csv_rows(path: Union[str, Path]):
    """读取 CSV：返回 (表头, 数据行列表)；数据行的行号从 2 开始（第 1 行为表头）"""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            records = list(csv.reader(f))
    except FileNotFoundError:
        raise IngestError(f"csv file {path} not found")
    except csv.Error as e:
        raise IngestError(f"malformed csv {path}: {e}")
    if not records or not records[0]:
        raise IngestError(f"csv file {path} has no header row", row_number=1)
    header = [name.strip() for name in records[0]]
    if len(set(header)) != len(header):
        raise IngestError(f"duplicate column names in header {header}", row_number=1)
    rows = records[1:]
    for offset, row in enumerate(rows):
        if len(row) != len(header):
            raise IngestError(f"expected {len(header)} fields, got {len(row)}", row_number=offset + 2)
    return header, rows


def ingest_csv(path: Union[str, Path], table: str, options: Optional[Dict[str, Any]] = None,
               catalog: Optional[Catalog] = None, pool: Optional[BufferPool] = None,
               replace: bool = False) -> TableEntry:
    """
    导入 CSV 并注册为表

    Args:
        path: CSV 文件（逗号分隔，必须有表头，字符串可加引号、引号内用两个引号转义）
        table: 表名
        options: schema（{列: 类型} 或 "a:int,b:float"）与 keys（键列）
        pool: 数值列以 4096 行为一页经过缓冲池载入

    Returns:
        目录中的表项
    """
    catalog = catalog or get_catalog()
    options = dict(options or {})
    if table in catalog.tables and not replace:
        raise IngestError(f"table {table!r} already exists")
    declared = _parse_schema_option(options.get("schema"))
    keys = _parse_keys_option(options.get("keys"))
    header, rows = read_csv_rows(path)
    for name in list(declared) + keys:
        if name not in header:
            raise IngestError(f"column {name!r} is not in the csv header {header}")

    raw_columns = [[row[position] for row in rows] for position in range(len(header))]
    schema = []
    for name, values in zip(header, raw_columns):
        kind = declared.get(name) or infer_column_type(values)
        if kind is ColumnType.VECTOR:
            raise IngestError(f"column {name}: vector columns cannot be ingested from csv")
        schema.append(Column(name, kind))

    relation_id = f"table.{table}"
    pages = 0
    parts: Dict[str, List[np.ndarray]] = {c.name: [] for c in schema}
    for batch_index, start in enumerate(range(0, len(rows), ROW_BATCH_SIZE)):
        stop = min(start + ROW_BATCH_SIZE, len(rows))
        for position, column in enumerate(schema):
            chunk = _convert(raw_columns[position][start:stop], column, first_row=start + 2)
            if pool is not None and column.type.numeric:
                key = (relation_id, batch_index, position)
                # 整数列按位存放，页内不经过浮点换算
                is_int = column.type is ColumnType.INT
                stored = chunk.view(np.float64) if is_int else chunk
                pool.put(key, stored.reshape(-1, 1))
                page = pool.get(key).reshape(-1)
                chunk = page.view(np.int64) if is_int else page
                pages += 1
            parts[column.name].append(chunk)
    if pool is not None:
        pool.drop_relation(relation_id)
    columns = {}
    for column in schema:
        if parts[column.name]:
            columns[column.name] = np.concatenate(parts[column.name])
        else:
            columns[column.name] = []
    try:
        relation = RowRelation(schema, columns, key_columns=keys)
    except InvalidArgumentError as e:
        raise IngestError(e.message)
    relation.pages = pages
    entry = catalog.register_table(table, relation, source=str(Path(path).resolve()),
                                   options={"schema": {c.name: c.type.value for c in schema}, "keys": keys},
                                   replace=replace)
    logger.info(f"📦 导入 {path} → {table}: {len(relation)} 行, 模式 "
                f"{', '.join(f'{c.name}:{c.type.value}' for c in schema)}")
    return entry


# ---- 查询结果与报告 ----

@dataclass
class QueryReport:
    """执行报告"""
    query: str
    stage_seconds: Dict[str, float] = field(default_factory=dict)
    nodes: List[Dict[str, Any]] = field(default_factory=list)
    pool_stats: Dict[str, Any] = field(default_factory=dict)
    cache_stats: Dict[str, Any] = field(default_factory=dict)
    inference_calls: int = 0
    inference_rows: int = 0
    result_rows: int = 0

    def format(self, timings: bool = True) -> str:
        return format_report(self, timings)


@dataclass
class QueryResult:
    relation: Any
    report: QueryReport
    plan: ExecutablePlan
    model_outputs: Optional[np.ndarray] = None

    def format(self, limit: Optional[int] = None) -> str:
        if isinstance(self.relation, RowRelation):
            return format_relation(self.relation, limit)
        return str(self.relation)


def _node_entries(executable: ExecutablePlan, stats: ExecutionStats) -> List[Dict[str, Any]]:
    entries = []
    for node_id in executable.order:
        node = executable.plan.nodes[node_id]
        representation = node.representation.value
        if node.block:
            representation += f"@{node.block[0]}x{node.block[1]}"
        entries.append({
            "id": node.id,
            "kind": node.label,
            "representation": representation,
            "est_bytes": int(node.est_bytes),
            "out_shape": node.out_shape,
            "seconds": stats.node_seconds.get(node.id, 0.0),
        })
    return entries


# ---- 会话 ----

class InferenceSession:
    """
    引擎会话

    打开时锁定溢出目录并创建缓冲池；persist=True 时目录（表的 CSV 来源、模型清单/元数据）
    以 JSON 保存在 home 下，供分开运行的命令行进程共享
    """

    def __init__(self, config: Optional[EngineConfig] = None, catalog: Optional[Catalog] = None,
                 persist: bool = False):
        self.config = config or load_engine_config()
        self.catalog = catalog if catalog is not None else Catalog()
        self.persist = persist
        self.home = Path(self.config.home)
        self.spill_lock = SpillDirLock(self.config.resolved_spill_dir)
        self.pool: Optional[BufferPool] = None
        self.caches: Dict[str, InferenceCache] = {}
        self.context: Optional[ExecutionContext] = None

    def open(self) -> "InferenceSession":
        self.spill_lock.acquire()
        try:
            self.pool = BufferPool(self.config.buffer_pool_bytes, self.config.resolved_spill_dir)
            self.context = ExecutionContext(self.catalog, self.pool, self.config, self.caches)
            if self.persist:
                self.load_catalog()
        except Exception:
            self.spill_lock.release()
            raise
        logger.info(f"✅ 会话已打开: home={self.home}, 工作线程 {self.config.workers}")
        return self

    def close(self) -> None:
        if self.context is not None:
            self.context.close()
        if self.pool is not None:
            self.pool.clear()
        self.spill_lock.release()
        logger.info("✅ 会话已关闭")

    def __enter__(self) -> "InferenceSession":
        return self.open()

    def __exit__(self, *exc) -> None:
        self.close()

    # ---- 目录持久化 ----

    @property
    def catalog_path(self) -> Path:
        return self.home / CATALOG_FILE

    def save_catalog(self) -> None:
        """原子写入：先写临时文件再重命名"""
        if not self.persist:
            return
        document = {
            "tables": {name: {"source": entry.source, "options": entry.options}
                       for name, entry in sorted(self.catalog.tables.items())},
            "models": {name: self.catalog.model_sources.get(name, {})
                       for name in sorted(self.catalog.models)},
        }
        self.home.mkdir(parents=True, exist_ok=True)
        temp = self.catalog_path.with_suffix(".json.tmp")
        with open(temp, "w", encoding="utf-8") as f:
            json.dump(document, f, ensure_ascii=False, indent=2)
        os.replace(temp, self.catalog_path)
        logger.info(f"💾 目录已保存: {self.catalog_path}")

    def load_catalog(self) -> None:
        if not self.catalog_path.exists():
            logger.info(f"📝 目录文件不存在，从空目录开始: {self.catalog_path}")
            return
        try:
            document = json.loads(self.catalog_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise InferDBError(f"catalog file {self.catalog_path} is corrupt: {e}", phase="io")
        for name, entry in document.get("tables", {}).items():
            try:
                ingest_csv(entry["source"], name, entry.get("options"), self.catalog, self.pool, replace=True)
            except IngestError as e:
                logger.warning(f"⚠️ 跳过表 {name}: {e}")
        for name, source in document.get("models", {}).items():
            if "manifest" in source:
                load_model(name, source["manifest"], self.catalog)
            elif "metadata" in source:
                create_model(name, source["metadata"], self.catalog)
        logger.info(f"✅ 目录已加载: {len(self.catalog.tables)} 张表, {len(self.catalog.models)} 个模型")

    # ---- 目录操作 ----

    def ingest_csv(self, path: Union[str, Path], table: str, options: Optional[Dict[str, Any]] = None,
                   replace: bool = False) -> TableEntry:
        entry = ingest_csv(path, table, options, self.catalog, self.pool, replace=replace)
        self.save_catalog()
        return entry

    def create_model(self, name: str, metadata: Union[str, Dict[str, Any]]) -> Model:
        model = create_model(name, metadata, self.catalog)
        self.save_catalog()
        return model

    def load_model(self, name: str, manifest_path: Union[str, Path]) -> Model:
        model = load_model(name, manifest_path, self.catalog)
        self.caches.pop(name, None)
        self.save_catalog()
        return model

    # ---- 查询 ----

    def _require_open(self) -> ExecutionContext:
        if self.context is None:
            raise InferDBError("session is not open", phase="execute")
        return self.context

    def plan_query(self, text: str, params: Optional[Dict[str, Any]] = None) -> ExecutablePlan:
        ast = parse_query(text)
        bind_query(ast, self.catalog, params)
        return optimize(build_ir(ast, self.catalog, params), self.config)

    def explain(self, text: str, params: Optional[Dict[str, Any]] = None) -> str:
        return self.plan_query(text, params).explain()

    def plan_model(self, name: str, batch: int) -> ExecutablePlan:
        """为目录中的模型单独规划（只有形状的预置模型也可以）"""
        if name not in self.catalog.models:
            raise InvalidArgumentError(f"unknown model {name!r}", phase="plan")
        return optimize(build_model_plan(self.catalog.models[name], batch), self.config)

    def run_query(self, text: str, params: Optional[Dict[str, Any]] = None) -> QueryResult:
        """
        解析 → 绑定 → 构建 IR → 优化 → 执行

        Returns:
            结果关系 + 执行报告（各节点表示与耗时、各阶段耗时、缓冲池与缓存统计）
        """
        context = self._require_open()
        stages: Dict[str, float] = {}

        started = time.perf_counter()
        ast = parse_query(text)
        stages["parse"] = time.perf_counter() - started

        started = time.perf_counter()
        bind_query(ast, self.catalog, params)
        stages["bind"] = time.perf_counter() - started

        started = time.perf_counter()
        executable = optimize(build_ir(ast, self.catalog, params), self.config)
        stages["plan"] = time.perf_counter() - started

        started = time.perf_counter()
        context.stats = ExecutionStats()
        try:
            relation = execute_plan(executable, context)
        except InferDBError:
            raise
        except Exception as e:
            logger.error(f"❌ 执行失败: {e}")
            raise InferDBError(f"{type(e).__name__}: {e}", phase="execute") from e
        stages["execute"] = time.perf_counter() - started

        stats = context.stats
        model_name = executable.plan.meta.get("model")
        cache = self.caches.get(model_name) if model_name else None
        cache_stats: Dict[str, Any] = {"mode": self.config.cache.mode}
        if cache is not None:
            cache_stats.update(cache.stats.to_dict())
        report = QueryReport(
            query=ast.render(),
            stage_seconds=stages,
            nodes=_node_entries(executable, stats),
            pool_stats=self.pool.stats.to_dict() if self.pool is not None else {},
            cache_stats=cache_stats,
            inference_calls=stats.inference_calls,
            inference_rows=stats.inference_rows,
            result_rows=len(relation),
        )
        logger.info(f"✅ 查询完成: {len(relation)} 行, 推理 {stats.inference_rows} 行, "
                    f"耗时 {sum(stages.values()):.3f}s")
        return QueryResult(relation, report, executable, stats.model_outputs)


def run_query(text: str, config: Optional[EngineConfig] = None, params: Optional[Dict[str, Any]] = None,
              catalog: Optional[Catalog] = None) -> QueryResult:
    """在临时会话中运行一条查询（默认使用进程级目录）"""
    with InferenceSession(config, catalog if catalog is not None else get_catalog()) as session:
        return session.run_query(text, params)
