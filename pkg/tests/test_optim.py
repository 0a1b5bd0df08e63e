import numpy as np
import pytest

from vrvc.autodiff import Tensor
from vrvc.errors import OptimizerError
from vrvc.optim import AdamState, adam_step


def test_zero_gradient_is_fixed_point():
    p = Tensor([1.0, -2.0, 3.0], requires_grad=True, name="p")
    state = AdamState([p], lr=0.1)
    before = p.data.copy()
    for _ in range(5):
        adam_step(state, [p], [np.zeros(3)])
    assert np.array_equal(p.data, before)
    assert state.step_count == 5


def test_first_step_magnitude():
    # m_hat = v_hat = 1 at step 1 => update = -lr / (1 + eps)
    p = Tensor([0.0], requires_grad=True, name="p")
    state = AdamState([p], lr=0.1)
    adam_step(state, [p], [np.ones(1)])
    expected = -0.1 / (1.0 + 1e-8)
    assert abs(p.data[0] - expected) < 1e-15


def test_identical_params_identical_updates(rng):
    g = rng.normal(size=4)
    p1 = Tensor([0.5, 1.5, -0.5, 2.0], requires_grad=True, name="p1")
    p2 = Tensor([0.5, 1.5, -0.5, 2.0], requires_grad=True, name="p2")
    state = AdamState([p1, p2], lr=0.01)
    for _ in range(3):
        adam_step(state, [p1, p2], [g, g])
    assert np.array_equal(p1.data, p2.data)


def test_nonfinite_gradient_names_parameter():
    p = Tensor([1.0], requires_grad=True, name="plane_xy")
    state = AdamState([p], lr=0.1)
    with pytest.raises(OptimizerError) as exc:
        adam_step(state, [p], [np.array([np.nan])])
    assert exc.value.param_name == "plane_xy"


def test_bad_learning_rate():
    with pytest.raises(OptimizerError):
        AdamState([Tensor([1.0], requires_grad=True)], lr=0.0)
