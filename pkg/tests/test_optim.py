"""Adam update oracles, the geometric learning-rate schedule, and guards."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sake.errors import ContractViolation
from sake.optim import OptimizerState, adam_step, gradient_check
from sake.tensor import Tensor


def state(lr=0.1, lr_final=None, total=100, **kw):
    return OptimizerState(lr_initial=lr,
                          lr_final=lr if lr_final is None else lr_final,
                          total_steps=total, **kw)


def test_zero_gradient_first_step_changes_nothing():
    p = Tensor(np.array([1.0, -2.0]))
    st_ = state()
    before = p.data.copy()
    adam_step({"p": p}, {"p": np.zeros(2)}, st_)
    assert np.array_equal(p.data, before)
    assert st_.step_count == 1


def test_first_step_moves_by_almost_exactly_lr():
    # Bias correction cancels at t=1: step = lr * g / (|g| + eps) for scalar g.
    p = Tensor(np.array([0.0]))
    adam_step({"p": p}, {"p": np.array([1.0])}, state(lr=0.1))
    expected = -0.1 * 1.0 / (1.0 + 1e-8)
    assert abs(p.data[0] - expected) < 1e-15
    assert abs(p.data[0] + 0.1) < 1e-8


def test_lr_schedule_hits_documented_endpoints():
    st_ = state(lr=1e-4, lr_final=1e-7, total=1000)
    assert st_.learning_rate(0) == pytest.approx(1e-4, rel=1e-12)
    assert st_.learning_rate(1000) == pytest.approx(1e-7, rel=1e-12)
    # geometric interpolation: halfway in steps = geometric mean of the ends
    assert st_.learning_rate(500) == pytest.approx(np.sqrt(1e-4 * 1e-7), rel=1e-12)


@given(st.integers(0, 999))
@settings(max_examples=100, deadline=None)
def test_lr_schedule_strictly_decreases(t):
    st_ = state(lr=1e-2, lr_final=1e-5, total=1000)
    assert st_.learning_rate(t) > st_.learning_rate(t + 1)


def test_constant_schedule_when_endpoints_match():
    st_ = state(lr=3e-3, total=10)
    assert st_.learning_rate(0) == st_.learning_rate(10) == 3e-3


def test_never_touched_parameter_is_exempt_from_decay():
    # A parameter with zero gradient and empty moment history must not
    # move even under weight decay; one with history keeps decaying.
    p_idle = Tensor(np.array([5.0]))
    p_used = Tensor(np.array([5.0]))
    st_ = state(lr=0.1, total=10, weight_decay=0.1)
    adam_step({"idle": p_idle, "used": p_used},
              {"idle": np.zeros(1), "used": np.array([1.0])}, st_)
    adam_step({"idle": p_idle, "used": p_used},
              {"idle": np.zeros(1), "used": np.zeros(1)}, st_)
    assert p_idle.data[0] == 5.0          # bitwise untouched
    assert p_used.data[0] != 5.0          # momentum + decay keep acting


def test_decay_exempt_names_skip_weight_decay():
    p_decayed = Tensor(np.array([2.0]))
    p_exempt = Tensor(np.array([2.0]))
    p_plain = Tensor(np.array([2.0]))
    g = np.array([0.3])
    adam_step({"w": p_decayed}, {"w": g}, state(weight_decay=0.5))
    adam_step({"b": p_exempt}, {"b": g}, state(weight_decay=0.5),
              decay_exempt={"b"})
    adam_step({"w": p_plain}, {"w": g}, state(weight_decay=0.0))
    assert np.array_equal(p_exempt.data, p_plain.data)
    assert not np.array_equal(p_decayed.data, p_plain.data)


def test_missing_gradient_defaults_to_zero():
    p = Tensor(np.array([1.0]))
    adam_step({"p": p}, {}, state())
    assert p.data[0] == 1.0


def test_two_steps_match_hand_rolled_adam():
    rng = np.random.default_rng(3)
    p = Tensor(rng.normal(size=4))
    ref = p.data.copy()
    st_ = state(lr=0.01, lr_final=0.001, total=50)
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 3):
        g = rng.normal(size=4)
        lr = 0.01 * (0.001 / 0.01) ** ((t - 1) / 50)
        m = 0.9 * m + (1.0 - 0.9) * g
        v = 0.999 * v + (1.0 - 0.999) * (g * g)
        ref = ref - lr * (m / (1.0 - 0.9 ** t)) / (
            np.sqrt(v / (1.0 - 0.999 ** t)) + 1e-8)
        adam_step({"p": p}, {"p": g}, st_)
    assert np.array_equal(p.data, ref)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6),
       st.floats(1e-5, 0.5), st.floats(0.0, 0.01))
@settings(max_examples=100, deadline=None)
def test_zero_gradients_never_change_parameters(values, lr, decay):
    p = Tensor(np.asarray(values))
    before = p.data.copy()
    st_ = state(lr=lr, total=5, weight_decay=decay)
    for _ in range(3):
        adam_step({"p": p}, {"p": np.zeros(len(values))}, st_)
    assert np.array_equal(p.data, before)


# ------------------------------------------------------------------ guards

def test_gradient_shape_mismatch_is_rejected():
    with pytest.raises(ContractViolation):
        adam_step({"p": Tensor(np.ones(2))}, {"p": np.ones(3)}, state())


def test_exhausted_optimizer_is_rejected():
    st_ = state(total=1)
    adam_step({"p": Tensor(np.ones(1))}, {"p": np.ones(1)}, st_)
    with pytest.raises(ContractViolation):
        adam_step({"p": Tensor(np.ones(1))}, {"p": np.ones(1)}, st_)


@pytest.mark.parametrize("kw", [
    {"beta1": 1.0}, {"beta1": 0.0}, {"beta2": 1.5}, {"epsilon": 0.0},
])
def test_invalid_adam_settings_are_rejected(kw):
    with pytest.raises(ContractViolation):
        OptimizerState(lr_initial=0.1, lr_final=0.1, total_steps=10, **kw)


def test_lr_final_above_initial_is_rejected():
    with pytest.raises(ContractViolation):
        OptimizerState(lr_initial=1e-4, lr_final=1e-3, total_steps=10)


def test_gradient_check_requires_float64():
    w = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ContractViolation):
        gradient_check(lambda: (w * w).sum(), [w])
