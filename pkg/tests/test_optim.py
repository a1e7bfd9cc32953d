import numpy as np
import pytest

from ssl_echo.tensor_core import (
    DivergenceError,
    Tape,
    Tensor,
    adam_step,
    backward,
    init_adam,
)


def test_zero_grad_zero_decay_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    params = {"p": p}
    state = init_adam(params, lr=0.1)
    before = p.data.copy()
    adam_step(params, {"p": np.zeros(3)}, state)
    np.testing.assert_array_equal(p.data, before)
    assert state.t == 1


def test_constant_grad_step_approaches_lr():
    # with g == 1 the bias-corrected moments converge to 1, so the
    # per-step delta tends to lr / (1 + eps) ~= lr
    p = Tensor(np.array(0.0), requires_grad=True)
    params = {"p": p}
    state = init_adam(params, lr=0.01)
    prev = float(p.data)
    delta = None
    for _ in range(500):
        adam_step(params, {"p": np.array(1.0)}, state)
        delta = prev - float(p.data)
        prev = float(p.data)
    assert delta == pytest.approx(0.01 / (1.0 + state.eps), rel=1e-6)


def test_reference_recurrence_and_quadratic_convergence():
    # independent oracle: run the textbook Adam recurrence by hand on
    # L(theta) = theta**2 and check both trajectories agree exactly
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta_ref, m, v = 1.0, 0.0, 0.0
    p = Tensor(np.array(1.0), requires_grad=True)
    params = {"p": p}
    state = init_adam(params, lr=lr, beta1=b1, beta2=b2, eps=eps)
    for t in range(1, 101):
        g = 2.0 * theta_ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta_ref -= lr * mhat / (np.sqrt(vhat) + eps)

        adam_step(params, {"p": 2.0 * p.data}, state)
        assert float(p.data) == pytest.approx(theta_ref, abs=1e-12)
    assert abs(theta_ref) < 1e-2


def test_weight_decay_is_coupled():
    # with zero loss gradient, the update direction comes from wd * param
    p = Tensor(np.array(2.0), requires_grad=True)
    params = {"p": p}
    state = init_adam(params, lr=0.1, weight_decay=0.01)
    adam_step(params, {"p": np.array(0.0)}, state)
    assert float(p.data) < 2.0


def test_nan_grad_raises_divergence():
    p = Tensor(np.array(1.0), requires_grad=True)
    params = {"p": p}
    state = init_adam(params, lr=0.1)
    with pytest.raises(DivergenceError):
        adam_step(params, {"p": np.array(np.nan)}, state)


def test_shape_mismatch_rejected():
    p = Tensor(np.ones(3), requires_grad=True)
    params = {"p": p}
    state = init_adam(params, lr=0.1)
    with pytest.raises(ValueError):
        adam_step(params, {"p": np.ones(4)}, state)


def test_step_counter_strictly_increases():
    p = Tensor(np.array(0.5), requires_grad=True)
    params = {"p": p}
    state = init_adam(params, lr=0.01)
    for expected in (1, 2, 3):
        adam_step(params, {"p": np.array(0.1)}, state)
        assert state.t == expected


def test_integrates_with_tape_gradients():
    w = Tensor(np.array(3.0), requires_grad=True)
    params = {"w": w}
    state = init_adam(params, lr=0.1)
    for _ in range(200):
        with Tape() as tape:
            loss = w * w
        backward(loss, tape)
        adam_step(params, {"w": w.grad}, state)
        w.zero_grad()
    assert abs(w.item()) < 1e-2
