import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparsetof import tensor as T
from sparsetof.optim import Adam, RMSprop, cosine_lr, make_optimizer


def test_cosine_cases():
    assert cosine_lr(1e-4, 0, 100) == 1e-4
    assert cosine_lr(1e-4, 100, 100) == pytest.approx(0, abs=1e-20)
    assert cosine_lr(1e-4, 50, 100) == pytest.approx(5e-5)
    with pytest.raises(ValueError):
        cosine_lr(1e-4, 101, 100)
    with pytest.raises(ValueError):
        cosine_lr(1e-4, -1, 100)


@given(st.floats(0, 1), st.floats(0, 1))
def test_cosine_monotone(a, b):
    lo, hi = sorted((a, b))
    assert cosine_lr(1.0, hi * 10, 10) <= cosine_lr(1.0, lo * 10, 10) + 1e-15


@pytest.mark.parametrize("opt", [RMSprop(), Adam()])
def test_zero_gradient(opt):
    p = T.parameter(np.arange(4, dtype=np.float32))
    state = opt.init([p])
    for _ in range(3):
        opt.step([p], [np.zeros(4, np.float32)], state, 0.1)
    np.testing.assert_array_equal(p.data, np.arange(4))


def test_adam_first_step_is_sign():
    g = np.array([3.0, -1e-3, 50.0], np.float32)
    p = T.parameter(np.zeros(3, np.float32))
    opt = Adam()
    opt.step([p], [g], opt.init([p]), 1e-2)
    np.testing.assert_allclose(p.data, -1e-2 * np.sign(g), rtol=1e-4)


def test_rmsprop_first_step():
    g = np.array([2.0, -0.5], np.float32)
    p = T.parameter(np.zeros(2, np.float32))
    opt = RMSprop()
    opt.step([p], [g], opt.init([p]), 1e-3)
    expected = -1e-3 * g / (np.sqrt(0.1 * g.astype(np.float64) ** 2) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-5)


# RMSprop at a constant rate settles into a +-lr/2 limit cycle on w^2,
# so it is driven by the cosine schedule it runs under during training
@pytest.mark.parametrize("name,decay", [("rmsprop", True), ("adam", False)])
def test_quadratic_bowl(name, decay):
    opt = make_optimizer(name)
    w = T.parameter(np.array([1.0], np.float32))
    state = opt.init([w])
    for t in range(500):
        grads = T.backward((w * w).sum())
        opt.step([w], [T.grad_of(grads, w)], state, cosine_lr(1e-2, t, 500) if decay else 1e-2)
    assert abs(w.data[0]) < 1e-3


def test_shape_mismatch():
    p = T.parameter(np.zeros(3, np.float32))
    for opt in (RMSprop(), Adam()):
        state = opt.init([p])
        with pytest.raises(ValueError):
            opt.step([p], [np.zeros(4, np.float32)], state, 0.1)
        with pytest.raises(ValueError):
            opt.step([p], [], state, 0.1)
    with pytest.raises(ValueError):
        make_optimizer("sgd")
