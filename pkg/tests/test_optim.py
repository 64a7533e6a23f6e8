import numpy as np
import pytest

from vlpt import optim
from vlpt.errors import ContractError
from vlpt.tensor import Parameter


def test_defaults_match_training_recipe():
    assert optim.ADAM_BETA1 == 0.9
    assert optim.ADAM_BETA2 == 0.999
    assert optim.ADAM_EPS == 1e-6
    assert optim.WEIGHT_DECAY == 0.01
    assert optim.CLIP_NORM == 1.0


def test_zero_grad_zero_decay_is_fixed_point():
    p = Parameter(np.array([1.0, -2.0, 3.5]), name="w")
    p.grad = np.zeros(3)
    before = p.data.copy()
    optim.adam_step([p], 0.1, weight_decay=0.0, t=1)
    np.testing.assert_array_equal(p.data, before)


def test_single_step_hand_oracle():
    # p=0.5, g=1, lr=0.01, defaults: value from an independent 50-digit
    # evaluation of the bias-corrected decoupled-decay update
    p = Parameter(np.array([0.5]), name="w")
    p.grad = np.array([1.0])
    optim.adam_step([p], 0.01, t=1)
    assert abs(p.data[0] - 0.4899500099999900000099) < 1e-15


def test_global_norm_clipping():
    a = Parameter(np.zeros(2), name="a")
    b = Parameter(np.zeros(1), name="b")
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([4.0])
    norm = optim.clip_gradients_([a, b], 1.0)
    assert abs(norm - 5.0) < 1e-12
    # clipped to unit global norm
    assert abs(np.sqrt((a.grad**2).sum() + (b.grad**2).sum()) - 1.0) < 1e-12
    np.testing.assert_allclose(a.grad, [0.6, 0.0])
    np.testing.assert_allclose(b.grad, [0.8])


def test_no_clip_below_threshold():
    a = Parameter(np.zeros(1), name="a")
    a.grad = np.array([0.5])
    optim.clip_gradients_([a], 1.0)
    np.testing.assert_array_equal(a.grad, [0.5])


def test_missing_gradient_rejected():
    p = Parameter(np.zeros(3), name="w")
    with pytest.raises(ContractError):
        optim.adam_step([p], 0.1)


def test_bias_correction_uses_timestep():
    # two parameters updated with different t diverge even with equal grads
    p1 = Parameter(np.array([1.0]), name="a")
    p2 = Parameter(np.array([1.0]), name="b")
    for p in (p1, p2):
        p.grad = np.array([0.5])
    optim.adam_step([p1], 0.01, weight_decay=0.0, t=1)
    # seed moments of p2 as if one step had already happened
    p2.m1[:] = p1.m1
    p2.m2[:] = p1.m2
    p2.data[:] = p1.data
    p2.grad = np.array([0.5])
    p1.grad = np.array([0.5])
    optim.adam_step([p1], 0.01, weight_decay=0.0, t=2)
    optim.adam_step([p2], 0.01, weight_decay=0.0, t=5)
    assert p1.data[0] != p2.data[0]
