#!/usr/bin/env python3
"""
推理缓存测试：精确/近似命中、先进先出淘汰、批内去重、错误率估计
"""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from config import CacheConfig, parse_cache_mode
from errors import InvalidArgumentError
from inference_cache import InferenceCache, estimate_cache_error, wald_interval


def test_exact_hit_after_put_and_quantization():
    cache = InferenceCache(CacheConfig(mode="exact", decimals=3))
    cache.put([1.0, 2.0], [0.1, 0.9])
    assert cache.lookup([1.0, 2.0]).hit
    assert_array_equal(cache.lookup([1.0001, 2.0]).prediction, [0.1, 0.9])
    assert not cache.lookup([1.01, 2.0]).hit
    # -0.0 与 0.0 视为同一个键
    cache.put([-0.0, 0.0], [1.0, 0.0])
    assert cache.lookup([0.0, -0.0]).hit


def test_approx_hit_within_tau_and_tie_goes_to_oldest():
    cache = InferenceCache(CacheConfig(mode="approx", tau=0.5))
    cache.put([0.0, 0.0], 1.0)
    cache.put([1.0, 0.0], 2.0)
    cache.put([-1.0, 0.0], 3.0)
    assert cache.lookup([0.3, 0.0]).prediction[0] == 1.0
    assert not cache.lookup([0.5, 0.6]).hit
    # 到两条等距，取先插入者
    wide = CacheConfig(mode="approx", tau=1.0)
    assert cache.lookup([0.5, 0.0], wide).prediction[0] == 1.0


def test_tau_zero_behaves_like_exact_match():
    cache = InferenceCache(CacheConfig(mode="approx", tau=0.0))
    cache.put([1.0, 1.0], 5.0)
    assert cache.lookup([1.0, 1.0]).hit
    assert not cache.lookup([1.0, 1.0 + 1e-9]).hit


def test_capacity_evicts_oldest_entry():
    cache = InferenceCache(CacheConfig(mode="exact", capacity=2))
    for value in (1.0, 2.0, 3.0):
        cache.put([value], value * 10)
    assert len(cache) == 2
    assert cache.stats.evictions == 1
    assert not cache.lookup([1.0]).hit
    assert [e.prediction[0] for e in cache.entries()] == [20.0, 30.0]


def test_dimension_mismatch_is_rejected():
    cache = InferenceCache(CacheConfig(mode="exact"))
    cache.put([1.0, 2.0], 0.0)
    with pytest.raises(InvalidArgumentError):
        cache.lookup([1.0, 2.0, 3.0])
    with pytest.raises(InvalidArgumentError):
        cache.put([1.0, 2.0], [0.0, 1.0])


def test_off_mode_never_hits():
    cache = InferenceCache(CacheConfig(mode="off"))
    calls = []

    def compute(batch):
        calls.append(len(batch))
        return batch.sum(axis=1, keepdims=True)

    out = cache.get_or_compute(np.ones((3, 2)), compute)
    assert_array_equal(out, [[2.0], [2.0], [2.0]])
    assert calls == [3]
    assert len(cache) == 0


def test_get_or_compute_dedupes_and_counts_hits():
    cache = InferenceCache(CacheConfig(mode="exact"))
    calls = []

    def compute(batch):
        calls.append(batch.copy())
        return np.column_stack([batch[:, 0], -batch[:, 0]])

    rows = np.array([[1.0], [2.0], [1.0], [3.0]])
    first = cache.get_or_compute(rows, compute)
    assert_array_equal(first[:, 0], [1.0, 2.0, 1.0, 3.0])
    assert_array_equal(calls[0], [[1.0], [2.0], [3.0]])
    # 批内重复的未命中行仍按未命中计
    assert cache.stats.misses == 4 and cache.stats.hits == 0

    second = cache.get_or_compute(np.array([[3.0], [4.0], [3.0]]), compute)
    assert_array_equal(second, [[3.0, -3.0], [4.0, -4.0], [3.0, -3.0]])
    assert_array_equal(calls[1], [[4.0]])
    assert (cache.stats.hits, cache.stats.misses) == (2, 5)
    assert cache.stats.hit_rate == pytest.approx(2 / 7)


def test_get_or_compute_with_empty_batch():
    cache = InferenceCache(CacheConfig(mode="exact"))
    out = cache.get_or_compute(np.zeros((0, 3)), lambda batch: np.zeros((0, 2)))
    assert out.shape == (0, 2)


def test_parse_cache_mode():
    assert parse_cache_mode("off").mode == "off"
    config = parse_cache_mode("approx:0.25")
    assert (config.mode, config.tau) == ("approx", 0.25)
    with pytest.raises(InvalidArgumentError):
        parse_cache_mode("approx:abc")
    with pytest.raises(InvalidArgumentError):
        parse_cache_mode("lru")
    with pytest.raises(InvalidArgumentError):
        CacheConfig(mode="approx", tau=-1.0)


def test_wald_interval_is_clipped():
    rate, low, high = wald_interval(0, 100)
    assert (rate, low, high) == (0.0, 0.0, 0.0)
    rate, low, high = wald_interval(50, 100)
    assert rate == 0.5
    assert low == pytest.approx(0.5 - 1.96 * 0.05)
    assert high == pytest.approx(0.5 + 1.96 * 0.05)


def threshold_model(batch: np.ndarray) -> np.ndarray:
    """一维特征 > 0 判为 1"""
    return (batch[:, :1] > 0).astype(np.float64)


def uniform_sampler(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, 1))


def test_error_estimate_is_zero_for_exact_cache():
    cache = InferenceCache(CacheConfig(mode="exact", decimals=2))
    grid = np.round(np.linspace(-1, 1, 201), 2).reshape(-1, 1)
    cache.get_or_compute(grid, threshold_model)
    before = (cache.stats.hits, cache.stats.misses)
    estimate = estimate_cache_error(threshold_model, lambda rng, n: rng.choice(grid[:, 0], size=(n, 1)),
                                    cache, n=200, seed=3)
    assert estimate.error_rate == 0.0
    assert (estimate.samples, estimate.hits) == (200, 200)
    assert (cache.stats.hits, cache.stats.misses) == before


def test_error_estimate_grows_with_tau():
    cache = InferenceCache(CacheConfig(mode="approx", tau=0.0, capacity=100))
    cache.get_or_compute(np.linspace(-1, 1, 11).reshape(-1, 1), threshold_model)
    tight = estimate_cache_error(threshold_model, uniform_sampler, cache, n=500,
                                 config=CacheConfig(mode="approx", tau=0.01), seed=1)
    loose = estimate_cache_error(threshold_model, uniform_sampler, cache, n=500,
                                 config=CacheConfig(mode="approx", tau=0.2), seed=1)
    assert loose.hits >= tight.hits
    assert loose.error_rate >= tight.error_rate
    assert 0.0 <= loose.ci_low <= loose.error_rate <= loose.ci_high <= 1.0


def test_error_estimate_needs_enough_samples():
    with pytest.raises(InvalidArgumentError):
        estimate_cache_error(threshold_model, uniform_sampler, InferenceCache(), n=10)
