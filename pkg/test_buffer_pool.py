#!/usr/bin/env python3
"""
缓冲池测试：预算、LRU 溢出、固定页、溢出文件格式、溢出目录锁
"""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from buffer_pool import (BufferPool, SpillDirLock, partition_into_pool, read_block_file, spill_file_name,
                         write_block_file)
from errors import BlockNotFoundError, CapacityError, InvalidArgumentError, SpillDirLockedError
from tensor_core import DenseTensor, reassemble

PAGE = 2 * 2 * 8  # 2×2 float64 页


def page(value: float) -> np.ndarray:
    return np.full((2, 2), value)


def test_put_get_within_budget(tmp_path):
    pool = BufferPool(3 * PAGE, tmp_path)
    for i in range(3):
        pool.put(("r", i, 0), page(i))
    assert pool.resident_bytes == 3 * PAGE
    assert pool.stats.spills == 0
    assert_array_equal(pool.get(("r", 1, 0)), page(1))
    assert pool.stats.hits == 1


def test_lru_page_spills_and_reloads_bitwise(tmp_path):
    pool = BufferPool(2 * PAGE, tmp_path)
    rng = np.random.default_rng(0)
    blocks = {i: rng.standard_normal((2, 2)) for i in range(4)}
    for i, block in blocks.items():
        pool.put(("r", i, 0), block)
        assert pool.resident_bytes <= pool.budget_bytes
    assert pool.stats.spills == 2
    assert (tmp_path / spill_file_name(("r", 0, 0))).exists()
    for i, block in blocks.items():
        assert_array_equal(pool.get(("r", i, 0)), block)
        assert pool.resident_bytes <= pool.budget_bytes
    assert pool.stats.reloads >= 2
    assert pool.stats.peak_resident_bytes <= pool.budget_bytes


def test_clean_reloaded_page_is_not_rewritten(tmp_path):
    pool = BufferPool(PAGE, tmp_path)
    pool.put(("r", 0, 0), page(1))
    pool.put(("r", 1, 0), page(2))
    pool.get(("r", 0, 0))
    spills = pool.stats.spills
    pool.get(("r", 1, 0))
    pool.get(("r", 0, 0))
    # 重新加载后未修改的页再次被淘汰时不写溢出文件
    assert pool.stats.spills == spills


def test_pinned_pages_are_never_evicted(tmp_path):
    pool = BufferPool(2 * PAGE, tmp_path)
    pool.put(("r", 0, 0), page(0))
    pool.put(("r", 1, 0), page(1))
    with pool.pinned(("r", 0, 0)):
        pool.put(("r", 2, 0), page(2))
        assert ("r", 0, 0) in pool._pages
    pool.pin(("r", 0, 0))
    pool.pin(("r", 2, 0))
    with pytest.raises(CapacityError):
        pool.put(("r", 3, 0), page(3))


def test_page_larger_than_budget(tmp_path):
    pool = BufferPool(PAGE, tmp_path)
    with pytest.raises(CapacityError):
        pool.put(("r", 0, 0), np.zeros((3, 3)))


def test_missing_page_and_unpin_errors(tmp_path):
    pool = BufferPool(PAGE, tmp_path)
    with pytest.raises(BlockNotFoundError):
        pool.get(("nope", 0, 0))
    pool.put(("r", 0, 0), page(0))
    with pytest.raises(InvalidArgumentError):
        pool.unpin(("r", 0, 0))


def test_drop_relation_removes_resident_and_spilled_pages(tmp_path):
    pool = BufferPool(PAGE, tmp_path)
    pool.put(("a", 0, 0), page(0))
    pool.put(("a", 0, 1), page(1))
    pool.put(("b", 0, 0), page(2))
    assert pool.drop_relation("a") == 2
    assert pool.relation_keys("a") == []
    assert not list(tmp_path.glob("a_*.blk"))
    assert ("b", 0, 0) in pool


def test_block_file_layout(tmp_path):
    """头部是小端 int64 行数与列数，之后是行主序小端 float64"""
    block = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    path = tmp_path / "x.blk"
    write_block_file(path, block)
    raw = path.read_bytes()
    assert len(raw) == 16 + 6 * 8
    assert np.frombuffer(raw[:16], dtype="<i8").tolist() == [2, 3]
    assert np.frombuffer(raw[16:], dtype="<f8").tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    assert_array_equal(read_block_file(path), block)


def test_truncated_block_file(tmp_path):
    path = tmp_path / "x.blk"
    write_block_file(path, np.ones((2, 2)))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(InvalidArgumentError):
        read_block_file(path)


def test_matrix_larger_than_pool_reassembles(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.standard_normal((10, 10))
    pool = BufferPool(3 * 4 * 4 * 8, tmp_path)
    m = partition_into_pool(DenseTensor(data), 4, 4, pool, "big")
    assert pool.stats.spills > 0
    assert_array_equal(reassemble(m).data, data)


def test_max_pinned_workers(tmp_path):
    pool = BufferPool(12 * PAGE, tmp_path)
    assert pool.max_pinned_workers(PAGE) == 4
    assert pool.max_pinned_workers(100 * PAGE) == 1


def test_spill_dir_lock_is_exclusive(tmp_path):
    with SpillDirLock(tmp_path):
        with pytest.raises(SpillDirLockedError):
            SpillDirLock(tmp_path).acquire()
    with SpillDirLock(tmp_path) as lock:
        assert lock.path.exists()
    assert not (tmp_path / SpillDirLock.LOCK_NAME).exists()


def test_failed_replacement_keeps_the_old_page(tmp_path):
    pool = BufferPool(PAGE, tmp_path)
    pool.put(("r", 0, 0), page(1))
    with pytest.raises(CapacityError):
        pool.put(("r", 0, 0), np.zeros((4, 4)))
    assert_array_equal(pool.get(("r", 0, 0)), page(1))
    assert pool.resident_bytes == PAGE


def test_replacement_with_a_larger_page_evicts_others(tmp_path):
    pool = BufferPool(3 * PAGE, tmp_path)
    for i in range(3):
        pool.put(("r", i, 0), page(i))
    wide = np.arange(8, dtype=np.float64).reshape(2, 4)
    pool.put(("r", 0, 0), wide)
    assert pool.resident_bytes <= pool.budget_bytes
    assert_array_equal(pool.get(("r", 0, 0)), wide)
    assert_array_equal(pool.get(("r", 1, 0)), page(1))
    assert_array_equal(pool.get(("r", 2, 0)), page(2))


def test_random_trace_matches_dict(tmp_path):
    """10,000 次随机 put/get/pin/unpin，与内存字典逐次对照"""
    rng = np.random.default_rng(42)
    pool = BufferPool(8 * PAGE, tmp_path)
    expected = {}
    pins = {}
    keys = [("t", i, 0) for i in range(32)]
    for _ in range(10_000):
        key = keys[int(rng.integers(len(keys)))]
        op = rng.choice(["put", "get", "pin", "unpin"], p=[0.35, 0.35, 0.15, 0.15])
        if op == "put" or key not in expected:
            block = rng.standard_normal((2, 2))
            pool.put(key, block)
            expected[key] = block
        elif op == "get":
            assert_array_equal(pool.get(key), expected[key])
        elif op == "pin" and sum(pins.values()) < 3:
            assert_array_equal(pool.pin(key), expected[key])
            pins[key] = pins.get(key, 0) + 1
        elif op == "unpin" and pins:
            pinned = sorted(pins)[int(rng.integers(len(pins)))]
            pool.unpin(pinned)
            pins[pinned] -= 1
            if pins[pinned] == 0:
                del pins[pinned]
        assert pool.resident_bytes <= pool.budget_bytes
    assert pool.stats.peak_resident_bytes <= pool.budget_bytes
    assert pool.stats.spills > 0
    for key, block in expected.items():
        assert_array_equal(pool.get(key), block)
