import numpy as np
import pytest

from effectstream.autodiff import Tensor
from effectstream.errors import GradientError
from effectstream.optim import AdamState, adam_update


def _params(values):
    return [(name, Tensor(v, requires_grad=True)) for name, v in values.items()]


def test_zero_gradient_leaves_parameters_unchanged():
    params = _params({"w": np.array([1.0, -2.0])})
    state = AdamState(learning_rate=0.1)
    adam_update(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params[0][1].data, [1.0, -2.0])
    assert state.step_count == 1


def test_constant_gradient_moves_opposite_sign():
    params = _params({"w": np.array([0.0])})
    state = AdamState(learning_rate=0.05)
    w = params[0][1]
    prev = w.data.copy()
    for _ in range(50):
        adam_update(params, {"w": np.array([2.5])}, state)
        assert w.data[0] < prev[0]
        prev = w.data.copy()


def test_single_step_matches_reference_formulas():
    # standalone re-implementation of the moment update equations
    lr, b1, b2, eps, g, theta = 0.1, 0.9, 0.999, 1e-8, 1.0, 0.7
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    expected = theta - lr * m_hat / (np.sqrt(v_hat) + eps)

    params = _params({"w": np.array([theta])})
    state = AdamState(learning_rate=lr, beta1=b1, beta2=b2, eps=eps)
    adam_update(params, {"w": np.array([g])}, state)
    assert params[0][1].data[0] == pytest.approx(expected, abs=1e-15)


def test_nan_gradient_refused_with_parameter_path():
    params = _params({"deep.layer.W": np.zeros(3)})
    state = AdamState()
    with pytest.raises(GradientError, match="deep.layer.W"):
        adam_update(params, {"deep.layer.W": np.array([0.0, np.nan, 1.0])}, state)
    assert state.step_count == 0  # refused before any mutation


def test_invalid_decays_rejected():
    with pytest.raises(ValueError):
        AdamState(beta1=1.0)
    with pytest.raises(ValueError):
        AdamState(learning_rate=0.0)
