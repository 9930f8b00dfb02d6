#!/usr/bin/env python3
"""
线性代数算子关系表示测试：块矩阵乘、加、激活、重分块、卷积、嵌入查找
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from buffer_pool import BufferPool
from errors import InvalidArgumentError, InvalidPlanError
from linalg_lowering import (activation_as_map, add_as_join, block_matmul_join, conv2d_lowered,
                             embedding_lookup, matmul_as_join_agg, reblock, release_blocked, tile_bias,
                             to_blocked)
from tensor_core import DenseTensor, apply_activation, conv2d_dense, reassemble


def blocked(data: np.ndarray, br: int, bc: int, pool=None):
    return to_blocked(DenseTensor(data), br, bc, pool)


@pytest.mark.parametrize("m,k,n,br,bk,bc", [
    (5, 7, 3, 1, 1, 1),
    (20, 13, 9, 7, 7, 7),
    (64, 64, 64, 64, 64, 64),
    (33, 50, 17, 8, 11, 5),
    (1, 1, 1, 3, 3, 3),
])
def test_matmul_as_join_agg_matches_dense(m, k, n, br, bk, bc):
    rng = np.random.default_rng(m * k * n)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    out = matmul_as_join_agg(blocked(a, br, bk), blocked(b, bk, bc))
    assert (out.block_rows, out.block_cols) == (br, bc)
    assert_allclose(reassemble(out).data, a @ b, rtol=1e-12, atol=1e-12)


def test_matmul_join_emits_one_partial_per_matching_pair():
    a = blocked(np.ones((4, 6)), 2, 3)
    b = blocked(np.ones((6, 2)), 3, 2)
    partials = block_matmul_join(a, b)
    assert len(partials.relation) == 2 * 2 * 1


def test_matmul_rejects_inner_mismatch():
    with pytest.raises(InvalidArgumentError):
        matmul_as_join_agg(blocked(np.ones((2, 4)), 2, 2), blocked(np.ones((4, 2)), 3, 2))
    with pytest.raises(InvalidArgumentError):
        matmul_as_join_agg(blocked(np.ones((2, 4)), 2, 2), blocked(np.ones((3, 2)), 2, 2))


def test_matmul_is_bitwise_identical_across_workers_and_pool(tmp_path):
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((40, 60)), rng.standard_normal((60, 30))
    memory = reassemble(matmul_as_join_agg(blocked(a, 8, 8), blocked(b, 8, 8), workers=1)).data
    threaded = reassemble(matmul_as_join_agg(blocked(a, 8, 8), blocked(b, 8, 8), workers=4)).data
    pool = BufferPool(6 * 8 * 8 * 8, tmp_path)
    pooled = reassemble(matmul_as_join_agg(blocked(a, 8, 8, pool), blocked(b, 8, 8, pool), pool, workers=2)).data
    assert_array_equal(memory, threaded)
    assert_array_equal(memory, pooled)
    assert pool.stats.spills > 0
    assert pool.stats.peak_resident_bytes <= pool.budget_bytes


def test_add_as_join_and_tile_bias():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 7))
    bias = rng.standard_normal(7)
    tiled = tile_bias(DenseTensor(bias), 5, 2, 3)
    out = add_as_join(blocked(x, 2, 3), tiled)
    assert_array_equal(reassemble(out).data, x + bias)
    with pytest.raises(InvalidArgumentError):
        add_as_join(blocked(x, 2, 3), blocked(x, 3, 3))


def test_activation_as_map_matches_dense():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 4))
    for kind in ("relu", "sigmoid"):
        out = reassemble(activation_as_map(blocked(x, 4, 3), kind)).data
        assert_array_equal(out, apply_activation(DenseTensor(x), kind).data)
    softmax = reassemble(activation_as_map(blocked(x, 4, 4), "softmax")).data
    assert_allclose(softmax, apply_activation(DenseTensor(x), "softmax").data, rtol=1e-15)


def test_softmax_across_column_blocks_is_rejected():
    with pytest.raises(InvalidPlanError):
        activation_as_map(blocked(np.ones((2, 4)), 2, 2), "softmax")


def test_reblock_preserves_values(tmp_path):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((11, 9))
    pool = BufferPool(1 << 20, tmp_path)
    src = blocked(x, 4, 2, pool)
    out = reblock(src, 3, 5, pool)
    assert (out.block_rows, out.block_cols) == (3, 5)
    assert_array_equal(reassemble(out).data, x)
    assert reblock(out, 3, 5, pool) is out
    release_blocked(out)
    assert pool.relation_keys(out.relation_id) == []


@pytest.mark.parametrize("representation", ["UDF", "RELATION"])
def test_conv2d_lowered_matches_dense(representation):
    rng = np.random.default_rng(4)
    image = rng.standard_normal((6, 5, 2))
    kernels = rng.standard_normal((3, 3, 2, 2))
    bias = rng.standard_normal(3)
    expected = conv2d_dense(DenseTensor(image), DenseTensor(kernels), DenseTensor(bias)).data
    out = conv2d_lowered(DenseTensor(image), DenseTensor(kernels), DenseTensor(bias), representation, 4, 3).data
    assert out.shape == (4, 4, 3)
    assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_conv2d_lowered_batch_stacks_images():
    rng = np.random.default_rng(5)
    images = rng.standard_normal((2, 4, 4, 1))
    kernels = rng.standard_normal((2, 2, 2, 1))
    bias = np.zeros(2)
    out = conv2d_lowered(DenseTensor(images), DenseTensor(kernels), DenseTensor(bias), "RELATION", 5, 5).data
    assert out.shape == (2, 3, 3, 2)
    for index in range(2):
        single = conv2d_dense(DenseTensor(images[index]), DenseTensor(kernels), DenseTensor(bias)).data
        assert_allclose(out[index], single, rtol=1e-12, atol=1e-12)


def test_conv2d_lowered_channel_mismatch():
    with pytest.raises(InvalidArgumentError):
        conv2d_lowered(DenseTensor(np.ones((3, 3, 2))), DenseTensor(np.ones((1, 1, 1, 3))), DenseTensor([0.0]))


@pytest.mark.parametrize("representation", ["UDF", "RELATION"])
def test_embedding_lookup(representation):
    table = DenseTensor(np.arange(12, dtype=np.float64).reshape(4, 3))
    out = embedding_lookup(table, [2, 0, 2], representation).data
    assert_array_equal(out, [[6, 7, 8], [0, 1, 2], [6, 7, 8]])
    summed = embedding_lookup(table, [1, 3], representation, reduce="sum").data
    assert_array_equal(summed, [12, 14, 16])


def test_embedding_lookup_rejects_out_of_range_ids():
    table = DenseTensor(np.ones((4, 2)))
    with pytest.raises(InvalidArgumentError):
        embedding_lookup(table, [4])
    with pytest.raises(InvalidArgumentError):
        embedding_lookup(table, [-1], "RELATION")


@pytest.mark.parametrize("representation", ["UDF", "RELATION"])
@pytest.mark.parametrize("reduce", ["none", "sum"])
def test_embedding_lookup_rejects_empty_ids(representation, reduce):
    table = DenseTensor(np.ones((4, 2)))
    with pytest.raises(InvalidArgumentError):
        embedding_lookup(table, [], representation, reduce=reduce)
