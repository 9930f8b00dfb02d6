#!/usr/bin/env python3
"""
计划执行测试：不同表示下模型输出一致、缓冲池受限时的执行、稠密内存上限与错误路径
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from buffer_pool import BufferPool
from config import EngineConfig, OptimizerConfig
from errors import CapacityError, LoadError, PlanError
from ir_optimizer import Representation, build_model_plan, optimize
from model_io import Catalog, Conv2DLayer, DenseLayer, EmbeddingLayer, FlattenLayer, Model, init_random_weights
from plan_executor import ExecutionContext, execute_plan
from tensor_core import Activation, DenseTensor, conv2d_dense


def engine_config(threshold: float, block=(4, 4), **changes) -> EngineConfig:
    optimizer = OptimizerConfig(memory_threshold_bytes=threshold, block_rows=block[0], block_cols=block[1])
    return EngineConfig(optimizer=optimizer, buffer_pool_bytes=changes.pop("buffer_pool_bytes", 1 << 20), **changes)


def run_model(model: Model, features: np.ndarray, config: EngineConfig, pool=None):
    catalog = Catalog()
    catalog.register_model(model)
    executable = optimize(build_model_plan(model, len(features)), config)
    context = ExecutionContext(catalog, pool, config)
    try:
        return execute_plan(executable, context, feed=features), executable
    finally:
        context.close()


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


@pytest.fixture
def mlp():
    model = Model("mlp", (6,), [DenseLayer(5, Activation.RELU), DenseLayer(3, Activation.SOFTMAX)])
    return init_random_weights(model, seed=2)


def mlp_reference(model: Model, x: np.ndarray) -> np.ndarray:
    first, second = model.layers
    hidden = np.maximum(x @ first.weights.data.T + first.bias.data, 0.0)
    return softmax(hidden @ second.weights.data.T + second.bias.data)


@pytest.mark.parametrize("threshold", [0, 600, math.inf])
def test_dense_model_matches_reference_in_every_representation(mlp, threshold):
    x = np.random.default_rng(0).standard_normal((9, 6))
    out, executable = run_model(mlp, x, engine_config(threshold))
    assert out.shape == (9, 3)
    assert_allclose(out, mlp_reference(mlp, x), rtol=1e-12, atol=1e-12)
    chosen = {n.representation for n in executable.plan.nodes.values()} - {Representation.NONE}
    if threshold == 0:
        assert chosen == {Representation.RELATION}
    elif threshold == math.inf:
        assert chosen == {Representation.UDF}


def test_relation_representation_under_small_pool(mlp, tmp_path):
    x = np.random.default_rng(1).standard_normal((12, 6))
    config = engine_config(0, block=(2, 2), buffer_pool_bytes=16 * 2 * 2 * 8)
    pool = BufferPool(config.buffer_pool_bytes, tmp_path)
    out, _ = run_model(mlp, x, config, pool)
    assert_allclose(out, mlp_reference(mlp, x), rtol=1e-12, atol=1e-12)
    assert pool.stats.peak_resident_bytes <= pool.budget_bytes


def test_results_do_not_depend_on_workers(mlp):
    x = np.random.default_rng(2).standard_normal((20, 6))
    one, _ = run_model(mlp, x, engine_config(0, workers=1))
    four, _ = run_model(mlp, x, engine_config(0, workers=4))
    assert np.array_equal(one, four)


def test_conv_model_in_both_representations():
    model = init_random_weights(Model("conv", (5, 5, 2), [Conv2DLayer(3, 2, 2, Activation.RELU), FlattenLayer(),
                                                          DenseLayer(2, Activation.SOFTMAX)]), seed=4)
    images = np.random.default_rng(3).standard_normal((3, 5, 5, 2))
    x = images.reshape(3, -1)
    conv, _, dense = model.layers
    expected = []
    for image in images:
        feature_map = conv2d_dense(DenseTensor(image), conv.kernels, conv.bias).data
        expected.append(np.maximum(feature_map, 0.0).reshape(-1))
    expected = softmax(np.vstack(expected) @ dense.weights.data.T + dense.bias.data)
    for threshold in (0, math.inf):
        out, _ = run_model(model, x, engine_config(threshold))
        assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_embedding_model_in_both_representations():
    model = init_random_weights(Model("emb", (4,), [EmbeddingLayer(10, 3, "sum"), DenseLayer(2, Activation.SIGMOID)]),
                                seed=5)
    ids = np.random.default_rng(4).integers(0, 10, size=(7, 4)).astype(np.float64)
    table = model.layers[0].table.data
    summed = table[ids.astype(int)].sum(axis=1)
    dense = model.layers[1]
    expected = 1.0 / (1.0 + np.exp(-(summed @ dense.weights.data.T + dense.bias.data)))
    for threshold in (0, math.inf):
        out, _ = run_model(model, ids, engine_config(threshold))
        assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_empty_feed_gives_empty_output(mlp):
    out, _ = run_model(mlp, np.empty((0, 6)), engine_config(math.inf))
    assert out.shape == (0, 3)


def test_model_plan_needs_a_feed(mlp):
    catalog = Catalog()
    catalog.register_model(mlp)
    config = engine_config(math.inf)
    executable = optimize(build_model_plan(mlp, 4), config)
    with pytest.raises(PlanError):
        execute_plan(executable, ExecutionContext(catalog, None, config))


def test_shape_only_model_cannot_execute():
    model = Model("bare", (3,), [DenseLayer(2)])
    with pytest.raises(LoadError):
        run_model(model, np.ones((2, 3)), engine_config(math.inf))


def test_dense_memory_cap_is_enforced(mlp):
    x = np.ones((50, 6))
    with pytest.raises(CapacityError):
        run_model(mlp, x, engine_config(math.inf, dense_memory_cap_bytes=1024))
    # 关系表示不受稠密上限约束
    out, _ = run_model(mlp, x, engine_config(0, dense_memory_cap_bytes=1024))
    assert out.shape == (50, 3)
