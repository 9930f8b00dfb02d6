#!/usr/bin/env python3
"""
UDF 管理器与内置 UDF 测试
"""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from errors import LoadError, PlanError
from model_io import DenseLayer, Model, init_random_weights
from tensor_core import Activation
from udf_manager import UdfManager, get_udf_manager, invoke_udf
from udfs import coerce_predictions, model_forward_udf, scalar_forward


def test_register_invoke_and_disable():
    manager = UdfManager()
    manager.register_udf("double", lambda value: value * 2, "乘 2")
    assert manager.invoke_udf("double", value=3) == 6
    manager.disable_udf("double")
    with pytest.raises(PlanError):
        manager.invoke_udf("double", value=3)
    manager.enable_udf("double")
    assert manager.invoke_udf("double", value=4) == 8
    with pytest.raises(PlanError):
        manager.invoke_udf("missing")


def test_handler_errors_propagate():
    manager = UdfManager()

    def broken(value):
        raise ZeroDivisionError("boom")

    manager.register_udf("broken", broken)
    with pytest.raises(ZeroDivisionError):
        manager.invoke_udf("broken", value=1)


def test_builtin_udfs_are_registered():
    names = set(get_udf_manager().list_udfs())
    assert {"model_forward", "fused_linalg", "block_activation"} <= names


def test_model_forward_through_manager():
    model = init_random_weights(Model("m", (3,), [DenseLayer(2, Activation.SIGMOID)]), seed=6)
    x = np.arange(6, dtype=np.float64).reshape(2, 3)
    out = invoke_udf("model_forward", model=model, features=x)
    layer = model.layers[0]
    expected = 1.0 / (1.0 + np.exp(-(x @ layer.weights.data.T + layer.bias.data)))
    assert np.allclose(out, expected, rtol=1e-12)
    assert_array_equal(scalar_forward(model, x[1]), out[1])


def test_model_forward_needs_weights():
    with pytest.raises(LoadError):
        model_forward_udf(Model("bare", (3,), [DenseLayer(2)]), np.ones((1, 3)))


def test_coerce_predictions():
    assert_array_equal(coerce_predictions(np.array([[0.2], [0.5], [0.9]])), [0, 1, 1])
    assert_array_equal(coerce_predictions(np.array([[0.1, 0.7, 0.2], [0.6, 0.3, 0.1]])), [1, 0])
    assert coerce_predictions(np.empty((0, 2))).shape == (0,)
