#!/usr/bin/env python3
"""
推理结果缓存
以特征向量为键缓存模型输出；exact 模式按量化后的键精确命中，
approx 模式在 L2 距离 ≤ τ 内返回最近条目（距离相同取最早插入者）
"""

import logging
import math
import threading
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from config import CacheConfig
from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

MIN_ERROR_SAMPLES = 30
_Z_95 = 1.96
_DISTANCE_CHUNK_ELEMENTS = 2_000_000


@dataclass
class CacheEntry:
    features: np.ndarray
    prediction: np.ndarray
    counter: int


@dataclass
class CacheResult:
    hit: bool
    prediction: Optional[np.ndarray] = None


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    inserts: int = 0

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def to_dict(self) -> Dict[str, float]:
        data = asdict(self)
        data["hit_rate"] = round(self.hit_rate, 6)
        return data


class InferenceCache:
    """
    定长环形缓存，先进先出淘汰

    查找可以与写入并发；写入串行，查找看到的要么是写入前、要么是写入后的完整状态
    """

    def __init__(self, config: Optional[CacheConfig] = None):
        self.config = config or CacheConfig(mode="exact")
        self.stats = CacheStats()
        self.dim: Optional[int] = None
        self.output_dim: Optional[int] = None
        self._features: Optional[np.ndarray] = None
        self._predictions: Optional[np.ndarray] = None
        self._counters = np.zeros(self.config.capacity, dtype=np.int64)
        self._keys: Dict[bytes, int] = {}
        self._slot_keys: Dict[int, bytes] = {}
        self._size = 0
        self._next_slot = 0
        self._counter = 0
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return self._size

    def quantized_key(self, features: np.ndarray) -> bytes:
        rounded = np.round(np.asarray(features, dtype=np.float64), self.config.decimals) + 0.0
        return rounded.tobytes()

    def _check_dim(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64).reshape(-1)
        if self.dim is not None and features.shape[0] != self.dim:
            raise InvalidArgumentError(f"cache holds {self.dim}-d features, got {features.shape[0]}")
        return features

    def put(self, features: np.ndarray, prediction: Union[np.ndarray, float, int]) -> None:
        """写入一条；超出容量时淘汰最早的条目"""
        features = self._check_dim(features)
        prediction = np.atleast_1d(np.asarray(prediction, dtype=np.float64))
        with self._lock:
            if self.dim is None:
                self.dim = features.shape[0]
                self.output_dim = prediction.shape[0]
                self._features = np.zeros((self.config.capacity, self.dim), dtype=np.float64)
                self._predictions = np.zeros((self.config.capacity, self.output_dim), dtype=np.float64)
            elif prediction.shape[0] != self.output_dim:
                raise InvalidArgumentError(f"cache holds {self.output_dim}-d predictions, got {prediction.shape[0]}")
            slot = self._next_slot
            if self._size == self.config.capacity:
                old_key = self._slot_keys.pop(slot)
                if self._keys.get(old_key) == slot:
                    del self._keys[old_key]
                self.stats.evictions += 1
            else:
                self._size += 1
            key = self.quantized_key(features)
            self._features[slot] = features
            self._predictions[slot] = prediction
            self._counters[slot] = self._counter
            self._keys[key] = slot
            self._slot_keys[slot] = key
            self._counter += 1
            self._next_slot = (slot + 1) % self.config.capacity
            self.stats.inserts += 1

    def entries(self):
        """按插入顺序返回全部条目"""
        with self._lock:
            order = np.argsort(self._counters[:self._size], kind="stable")
            return [CacheEntry(self._features[i].copy(), self._predictions[i].copy(), int(self._counters[i]))
                    for i in order]

    def _nearest(self, queries: np.ndarray, tau: float) -> Tuple[np.ndarray, np.ndarray]:
        """暴力 L2 扫描：返回 (是否命中, 命中槽位)"""
        hits = np.zeros(len(queries), dtype=bool)
        slots = np.full(len(queries), -1, dtype=np.int64)
        if self._size == 0 or len(queries) == 0:
            return hits, slots
        stored = self._features[:self._size]
        counters = self._counters[:self._size]
        chunk = max(1, _DISTANCE_CHUNK_ELEMENTS // max(1, self._size * self.dim))
        for start in range(0, len(queries), chunk):
            block = queries[start:start + chunk]
            diff = block[:, np.newaxis, :] - stored[np.newaxis, :, :]
            distances = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
            for offset, row in enumerate(distances):
                best = row.min()
                if best <= tau:
                    candidates = np.flatnonzero(row == best)
                    hits[start + offset] = True
                    slots[start + offset] = candidates[np.argmin(counters[candidates])]
        return hits, slots

    def lookup_batch(self, features: np.ndarray, config: Optional[CacheConfig] = None,
                     record: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """
        批量查找

        Returns:
            (命中掩码, 预测矩阵)；未命中行的预测为 nan
        """
        config = config or self.config
        queries = np.asarray(features, dtype=np.float64)
        if queries.ndim != 2:
            queries = queries.reshape(len(queries), -1)
        if self.dim is not None and len(queries) and queries.shape[1] != self.dim:
            raise InvalidArgumentError(f"cache holds {self.dim}-d features, got {queries.shape[1]}")
        with self._lock:
            width = self.output_dim or 1
            predictions = np.full((len(queries), width), np.nan)
            if config.mode == "off" or self._size == 0:
                hits = np.zeros(len(queries), dtype=bool)
            elif config.mode == "exact":
                slots = np.array([self._keys.get(self.quantized_key(q), -1) for q in queries], dtype=np.int64)
                hits = slots >= 0
                predictions[hits] = self._predictions[slots[hits]]
            else:
                hits, slots = self._nearest(queries, config.tau)
                predictions[hits] = self._predictions[slots[hits]]
            if record:
                self.stats.hits += int(hits.sum())
                self.stats.misses += int((~hits).sum())
        return hits, predictions

    def lookup(self, features: np.ndarray, config: Optional[CacheConfig] = None) -> CacheResult:
        """单条查找"""
        features = self._check_dim(features)
        hits, predictions = self.lookup_batch(features.reshape(1, -1), config)
        return CacheResult(True, predictions[0]) if hits[0] else CacheResult(False)

    def _dedupe_key(self, row: np.ndarray) -> bytes:
        return self.quantized_key(row) if self.config.mode == "exact" else row.tobytes()

    def get_or_compute(self, features: np.ndarray, compute: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """
        缓存包裹的批量推理

        批内相同的行先去重；未命中的行作为一个子批推理，再按首次出现顺序写入缓存
        """
        features = np.asarray(features, dtype=np.float64)
        if self.config.mode == "off":
            return compute(features)
        if len(features) == 0:
            return compute(features)
        first_index: Dict[bytes, int] = {}
        inverse = np.empty(len(features), dtype=np.int64)
        unique_rows = []
        for i, row in enumerate(features):
            key = self._dedupe_key(row)
            if key not in first_index:
                first_index[key] = len(unique_rows)
                unique_rows.append(i)
            inverse[i] = first_index[key]
        unique = features[unique_rows]
        hits, predictions = self.lookup_batch(unique, record=False)
        misses = np.flatnonzero(~hits)
        if len(misses):
            computed = np.asarray(compute(unique[misses]), dtype=np.float64).reshape(len(misses), -1)
            if predictions.shape[1] != computed.shape[1]:
                predictions = np.full((len(unique), computed.shape[1]), np.nan)
                _, again = self.lookup_batch(unique, record=False)
                predictions[hits] = again[hits]
            predictions[misses] = computed
            for position in misses:
                self.put(unique[position], computed[np.searchsorted(misses, position)])
        # 每个原始行按其去重代表是否命中计数
        row_hits = int(hits[inverse].sum())
        with self._lock:
            self.stats.hits += row_hits
            self.stats.misses += len(features) - row_hits
        return predictions[inverse]


@dataclass
class CacheErrorEstimate:
    error_rate: float
    ci_low: float
    ci_high: float
    samples: int
    mismatches: int
    hits: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def wald_interval(mismatches: int, n: int) -> Tuple[float, float, float]:
    """正态近似的 95% 置信区间 p ± 1.96·sqrt(p(1−p)/n)，截断到 [0, 1]"""
    p = mismatches / n
    half = _Z_95 * math.sqrt(p * (1 - p) / n)
    return p, max(0.0, p - half), min(1.0, p + half)


def estimate_cache_error(predict: Callable[[np.ndarray], np.ndarray], sampler: Callable[[np.random.Generator, int], np.ndarray],
                         cache: InferenceCache, n: int = 1000, config: Optional[CacheConfig] = None,
                         seed: int = 0, labels: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> CacheErrorEstimate:
    """
    蒙特卡洛估计缓存路径的错误率

    Args:
        predict: 完整推理函数（特征批 → 模型输出）
        sampler: (rng, n) → n 行特征的工作负载采样器
        cache: 已预先填充的缓存（估计过程中不写入、不计入统计）
        n: 样本数，至少 30
        config: 覆盖缓存的查找模式与 τ
        labels: 输出 → 标签；默认 argmax / 0.5 阈值

    Returns:
        错误率（命中且答案不同的比例；未命中回落到完整推理，视为一致）与 95% 置信区间
    """
    if n < MIN_ERROR_SAMPLES:
        raise InvalidArgumentError(f"need at least {MIN_ERROR_SAMPLES} samples, got {n}")
    if labels is None:
        from udfs import coerce_predictions as labels
    rng = np.random.default_rng(seed)
    queries = np.asarray(sampler(rng, n), dtype=np.float64).reshape(n, -1)
    hits, cached = cache.lookup_batch(queries, config, record=False)
    mismatches = 0
    if hits.any():
        full = labels(np.asarray(predict(queries[hits]), dtype=np.float64))
        mismatches = int(np.sum(labels(cached[hits]) != full))
    rate, low, high = wald_interval(mismatches, n)
    logger.info(f"🎯 缓存错误率估计: {rate:.4f} [{low:.4f}, {high:.4f}] (n={n}, 命中 {int(hits.sum())})")
    return CacheErrorEstimate(rate, low, high, n, mismatches, int(hits.sum()))
