import numpy as np
import pytest

from core.optim import Adam
from utils.errors import ConfigError


def test_first_step_moves_by_learning_rate_against_gradient():
    adam = Adam(lr=0.1)
    out = adam.step({"w": np.array([1.0, -2.0, 0.5])}, {"w": np.array([3.0, -0.01, 0.0])})
    np.testing.assert_allclose(out["w"], [0.9, -1.9, 0.5], atol=1e-6)


def test_minimizes_quadratic():
    adam = Adam(lr=0.05)
    params = {"x": np.array([3.0, -4.0])}
    for _ in range(2000):
        params = adam.step(params, {"x": 2.0 * params["x"]})
    np.testing.assert_allclose(params["x"], 0.0, atol=1e-2)


def test_inputs_are_not_modified_and_dtype_is_kept():
    adam = Adam(lr=0.1)
    value = np.ones(4, dtype=np.float32)
    out = adam.step({"w": value}, {"w": np.ones(4)})
    assert np.all(value == 1.0)
    assert out["w"].dtype == np.float32


def test_parameters_without_gradient_pass_through():
    adam = Adam(lr=0.1)
    frozen = np.arange(3.0)
    out = adam.step({"a": frozen, "b": np.zeros(2)}, {"b": np.ones(2)})
    assert out["a"] is frozen


def test_moments_are_kept_per_name():
    adam = Adam(lr=0.1)
    adam.step({"a": np.zeros(2)}, {"a": np.ones(2)})
    out = adam.step({"a": np.zeros(2), "b": np.zeros(2)}, {"a": np.ones(2), "b": np.ones(2)})
    assert adam.t == 2
    assert not np.allclose(out["a"], out["b"])


def test_decay_and_reset():
    adam = Adam(lr=0.2)
    adam.decay(0.5)
    assert adam.lr == pytest.approx(0.1)
    adam.step({"w": np.zeros(1)}, {"w": np.ones(1)})
    adam.reset()
    assert adam.t == 0


def test_shape_mismatch():
    with pytest.raises(ConfigError):
        Adam(lr=0.1).step({"w": np.zeros(3)}, {"w": np.zeros(2)})


@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"lr": 0.1, "beta1": 1.0}, {"lr": 0.1, "eps": 0.0}])
def test_invalid_hyperparameters(kwargs):
    with pytest.raises(ConfigError):
        Adam(**kwargs)
