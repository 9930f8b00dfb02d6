#!/usr/bin/env python3
"""
缓冲池
按字节预算管理张量块的驻留，超出预算时按 LRU 把未固定的页写入溢出目录
"""

import os
import logging
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple, Union

import numpy as np

from errors import BlockNotFoundError, CapacityError, InvalidArgumentError, SpillDirLockedError
from tensor_core import BlockKey, BlockedMatrix, DenseTensor, _frozen, block_partition

logger = logging.getLogger(__name__)

PageKey = Tuple[str, int, int]  # (relation_id, block_row, block_col)

# 溢出文件头：两个小端 int64（行数、列数）
_HEADER_DTYPE = np.dtype("<i8")
_DATA_DTYPE = np.dtype("<f8")


@dataclass
class PoolStats:
    """缓冲池统计"""
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    spills: int = 0
    reloads: int = 0
    peak_resident_bytes: int = 0

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


def spill_file_name(key: PageKey) -> str:
    relation_id, block_row, block_col = key
    safe = relation_id.replace(os.sep, "-").replace("/", "-")
    return f"{safe}_{block_row}_{block_col}.blk"


def write_block_file(path: Path, block: np.ndarray) -> None:
    """写出块文件：小端 (rows, cols) 头 + 行主序小端 float64"""
    rows, cols = block.shape
    with open(path, "wb") as f:
        f.write(np.array([rows, cols], dtype=_HEADER_DTYPE).tobytes())
        f.write(np.ascontiguousarray(block, dtype=_DATA_DTYPE).tobytes())


def read_block_file(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    header = _HEADER_DTYPE.itemsize * 2
    rows, cols = (int(v) for v in np.frombuffer(raw[:header], dtype=_HEADER_DTYPE))
    data = np.frombuffer(raw[header:], dtype=_DATA_DTYPE)
    if data.size != rows * cols:
        raise InvalidArgumentError(f"spill file {path.name} is truncated")
    return _frozen(data.reshape(rows, cols).astype(np.float64))


class BufferPool:
    """
    字节预算的块缓冲池

    - 驻留字节数在任何可观察时刻都不超过 budget_bytes
    - 被固定（pin）的页不会被淘汰
    - 溢出后再加载的页与原页逐位相同
    """

    def __init__(self, budget_bytes: int, spill_dir: Union[str, Path]):
        if budget_bytes <= 0:
            raise InvalidArgumentError(f"buffer pool budget must be positive, got {budget_bytes}")
        self.budget_bytes = budget_bytes
        self.spill_dir = Path(spill_dir)
        self.spill_dir.mkdir(parents=True, exist_ok=True)
        self.stats = PoolStats()

        self._pages: "OrderedDict[PageKey, np.ndarray]" = OrderedDict()
        self._pins: Dict[PageKey, int] = {}
        self._spilled: Set[PageKey] = set()
        self._clean: Set[PageKey] = set()  # 溢出文件与驻留内容一致的页
        self._resident_bytes = 0
        self._lock = threading.RLock()
        logger.info(f"📦 缓冲池初始化: 预算 {budget_bytes} 字节, 溢出目录 {self.spill_dir}")

    @property
    def resident_bytes(self) -> int:
        return self._resident_bytes

    def page_count(self) -> int:
        return len(self._pages)

    def __contains__(self, key: PageKey) -> bool:
        with self._lock:
            return key in self._pages or key in self._spilled

    def _path(self, key: PageKey) -> Path:
        return self.spill_dir / spill_file_name(key)

    def _evict_one(self) -> bool:
        return self._evict_other(None)

    def _evict_other(self, keep: Optional[PageKey]) -> bool:
        """按 LRU 顺序淘汰一个未被 pin 且不是 keep 的页"""
        for key in self._pages:
            if key != keep and self._pins.get(key, 0) == 0:
                page = self._pages.pop(key)
                if key not in self._clean:
                    write_block_file(self._path(key), page)
                    self.stats.spills += 1
                    logger.debug(f"💾 溢出页 {key} ({page.nbytes} 字节)")
                self._clean.discard(key)
                self._spilled.add(key)
                self._resident_bytes -= page.nbytes
                self.stats.evictions += 1
                return True
        return False

    def _make_room(self, nbytes: int) -> None:
        if nbytes > self.budget_bytes:
            raise CapacityError(f"page of {nbytes} bytes exceeds buffer pool budget {self.budget_bytes}")
        while self._resident_bytes + nbytes > self.budget_bytes:
            if not self._evict_one():
                raise CapacityError(
                    f"pinned pages ({self._resident_bytes} bytes) leave no room for {nbytes} bytes "
                    f"within budget {self.budget_bytes}")

    def _install(self, key: PageKey, page: np.ndarray) -> None:
        self._pages[key] = page
        self._pages.move_to_end(key)
        self._resident_bytes += page.nbytes
        self.stats.peak_resident_bytes = max(self.stats.peak_resident_bytes, self._resident_bytes)

    def put(self, key: PageKey, block: np.ndarray) -> None:
        """写入一页；若已存在则替换"""
        page = _frozen(block)
        if page.ndim != 2:
            raise InvalidArgumentError(f"pages are 2-d blocks, got shape {page.shape}")
        with self._lock:
            old = self._pages.get(key)
            freed = old.nbytes if old is not None else 0
            pinned = sum(p.nbytes for k, p in self._pages.items() if k != key and self._pins.get(k, 0) > 0)
            if page.nbytes > self.budget_bytes - pinned:
                logger.error(f"❌ 缓冲池容量不足，无法写入页 {key}")
                raise CapacityError(
                    f"page of {page.nbytes} bytes does not fit: budget {self.budget_bytes}, pinned {pinned}")
            # 旧页仍占着位置时只为差额腾空间；旧页本身不参与淘汰
            if old is not None:
                self._pages.move_to_end(key)
            while self._resident_bytes - freed + page.nbytes > self.budget_bytes:
                if not self._evict_other(key):
                    logger.error(f"❌ 缓冲池容量不足，无法写入页 {key}")
                    raise CapacityError(f"no evictable page leaves room for {page.nbytes} bytes")
            if old is not None:
                self._pages.pop(key)
                self._resident_bytes -= freed
            if key in self._spilled:
                self._spilled.discard(key)
                self._path(key).unlink(missing_ok=True)
            self._clean.discard(key)
            self._install(key, page)

    def _load(self, key: PageKey) -> np.ndarray:
        if key in self._pages:
            self.stats.hits += 1
            self._pages.move_to_end(key)
            return self._pages[key]
        if key not in self._spilled:
            raise BlockNotFoundError(f"page {key} not found")
        self.stats.misses += 1
        page = read_block_file(self._path(key))
        self._make_room(page.nbytes)
        self._spilled.discard(key)
        self._clean.add(key)
        self._install(key, page)
        self.stats.reloads += 1
        return page

    def get(self, key: PageKey) -> np.ndarray:
        """读取一页，必要时从溢出文件透明重新加载"""
        with self._lock:
            return self._load(key)

    def pin(self, key: PageKey) -> np.ndarray:
        with self._lock:
            page = self._load(key)
            self._pins[key] = self._pins.get(key, 0) + 1
            return page

    def unpin(self, key: PageKey) -> None:
        with self._lock:
            count = self._pins.get(key, 0)
            if count == 0:
                raise InvalidArgumentError(f"page {key} is not pinned")
            if count == 1:
                del self._pins[key]
            else:
                self._pins[key] = count - 1

    @contextmanager
    def pinned(self, key: PageKey) -> Iterator[np.ndarray]:
        page = self.pin(key)
        try:
            yield page
        finally:
            self.unpin(key)

    def discard(self, key: PageKey) -> None:
        """删除一页（驻留或已溢出）"""
        with self._lock:
            if self._pins.get(key):
                raise InvalidArgumentError(f"cannot discard pinned page {key}")
            if key in self._pages:
                self._resident_bytes -= self._pages.pop(key).nbytes
            if key in self._spilled or key in self._clean:
                self._path(key).unlink(missing_ok=True)
            self._spilled.discard(key)
            self._clean.discard(key)

    def drop_relation(self, relation_id: str) -> int:
        """删除某个关系的全部页，返回删除页数"""
        with self._lock:
            keys = [k for k in list(self._pages) + list(self._spilled) if k[0] == relation_id]
            for key in keys:
                self.discard(key)
            return len(keys)

    def relation_keys(self, relation_id: str) -> List[PageKey]:
        with self._lock:
            return sorted({k for k in list(self._pages) + list(self._spilled) if k[0] == relation_id})

    def max_pinned_workers(self, page_bytes: int, pages_per_worker: int = 3) -> int:
        """在预算内可同时工作的线程数（每个线程固定若干页）"""
        if page_bytes <= 0:
            return 1
        return max(1, self.budget_bytes // (page_bytes * pages_per_worker))

    def clear(self) -> None:
        with self._lock:
            for key in list(self._pages) + list(self._spilled):
                self._pins.pop(key, None)
                self.discard(key)


class PooledBlockStore:
    """缓冲池中的块存储，块键为 (relation_id, i, j)"""

    def __init__(self, pool: BufferPool, relation_id: str):
        self.pool = pool
        self.relation_id = relation_id
        self._keys: List[BlockKey] = []

    def put(self, key: BlockKey, block: np.ndarray) -> None:
        self.pool.put((self.relation_id, key[0], key[1]), block)
        self._keys.append(key)

    def get(self, key: BlockKey) -> np.ndarray:
        return self.pool.get((self.relation_id, key[0], key[1]))

    def pin(self, key: BlockKey) -> np.ndarray:
        return self.pool.pin((self.relation_id, key[0], key[1]))

    def unpin(self, key: BlockKey) -> None:
        self.pool.unpin((self.relation_id, key[0], key[1]))

    def keys(self) -> Iterable[BlockKey]:
        return list(self._keys)

    def release(self) -> None:
        self.pool.drop_relation(self.relation_id)
        self._keys = []


def store_blocked(matrix: BlockedMatrix, pool: BufferPool, relation_id: str) -> BlockedMatrix:
    """把块矩阵的全部块写入缓冲池，返回缓冲池支撑的块矩阵"""
    store = PooledBlockStore(pool, relation_id)
    for i, j in matrix.grid_keys():
        store.put((i, j), matrix.store.get((i, j)))
    return BlockedMatrix(matrix.logical_rows, matrix.logical_cols, matrix.block_rows, matrix.block_cols,
                         store, relation_id)


def partition_into_pool(t: DenseTensor, block_rows: int, block_cols: int, pool: BufferPool,
                        relation_id: str) -> BlockedMatrix:
    return store_blocked(block_partition(t, block_rows, block_cols), pool, relation_id)


class SpillDirLock:
    """溢出目录锁：同一溢出目录同时只允许一个引擎会话使用"""

    LOCK_NAME = ".lock"

    def __init__(self, spill_dir: Union[str, Path]):
        self.path = Path(spill_dir) / self.LOCK_NAME
        self._held = False

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise SpillDirLockedError(f"spill directory {self.path.parent} is in use by another process")
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._held = True

    def release(self) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False

    def __enter__(self) -> "SpillDirLock":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()
