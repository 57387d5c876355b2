"""AdamW and the warmup-cosine schedule."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidenet.autograd import Parameter
from sidenet.errors import ConfigError
from sidenet.optim import AdamWHyper, AdamWState, adamw_step, cosine_schedule


def param(values, grad, name="w"):
    p = Parameter(np.array(values, dtype=np.float64), name=name)
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_zero_gradient_is_pure_decoupled_decay():
    p = param([2.0, -4.0], [0.0, 0.0])
    adamw_step([p], AdamWState(), AdamWHyper(lr=0.1, weight_decay=0.15))
    np.testing.assert_array_equal(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.15))


def test_first_step_without_decay_hand_value():
    # bias correction makes m_hat = g and v_hat = g^2 on step one
    g, lr, eps = 0.3, 0.01, 1e-8
    p = param([1.0], [g])
    adamw_step([p], AdamWState(), AdamWHyper(lr=lr, weight_decay=0.0, eps=eps))
    assert p.data[0] == pytest.approx(1.0 - lr * g / (abs(g) + eps), rel=1e-15)


def reference_adamw(x, grads, lr, wd, b1, b2, eps):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        x -= lr * wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return x


@settings(max_examples=40, deadline=None)
@given(
    x0=st.floats(-3, 3),
    grads=st.lists(st.floats(-2, 2), min_size=1, max_size=6),
    wd=st.sampled_from([0.0, 0.15, 0.5]),
)
def test_matches_scalar_reference(x0, grads, wd):
    p = param([x0], [0.0])
    state, hyper = AdamWState(), AdamWHyper(lr=0.05, weight_decay=wd)
    for g in grads:
        p.grad = np.array([g])
        adamw_step([p], state, hyper)
    want = reference_adamw(x0, grads, 0.05, wd, 0.9, 0.999, 1e-8)
    assert p.data[0] == pytest.approx(want, rel=1e-12, abs=1e-14)


def test_no_decay_names_and_missing_grads():
    a, b = param([1.0], [0.0], "a"), param([1.0], [0.0], "b")
    c = Parameter(np.array([1.0]), name="c")
    adamw_step([a, b, c], AdamWState(), AdamWHyper(lr=0.1, weight_decay=0.5), no_decay={"b"})
    assert a.data[0] == pytest.approx(0.95) and b.data[0] == 1.0 and c.data[0] == 1.0


def test_identical_runs_bit_identical():
    def run():
        rng = np.random.default_rng(0)
        p = param(rng.standard_normal(5), np.zeros(5))
        state = AdamWState()
        for _ in range(10):
            p.grad = rng.standard_normal(5)
            adamw_step([p], state, AdamWHyper())
        return p.data.tobytes()

    assert run() == run()


def test_state_bytes_two_moments():
    p = param(np.zeros((3, 4)), np.ones((3, 4)))
    state = AdamWState()
    adamw_step([p], state, AdamWHyper())
    assert state.nbytes() == 2 * p.data.nbytes


def test_schedule_landmarks():
    assert cosine_schedule(10, 110, 10, 1e-3) == 1e-3
    assert cosine_schedule(110, 110, 10, 1e-3) == 0.0
    assert cosine_schedule(60, 110, 10, 1e-3) == pytest.approx(5e-4, rel=1e-15)
    assert cosine_schedule(0, 110, 10, 1e-3) == 0.0
    assert cosine_schedule(5, 110, 10, 1e-3) == pytest.approx(5e-4)


def test_schedule_errors():
    with pytest.raises(ConfigError):
        cosine_schedule(0, 10, 10, 1.0)
    with pytest.raises(ConfigError):
        cosine_schedule(11, 10, 2, 1.0)


@settings(max_examples=50, deadline=None)
@given(total=st.integers(2, 500), data=st.data())
def test_schedule_shape(total, data):
    warm = data.draw(st.integers(0, total - 1))
    lrs = [cosine_schedule(s, total, warm, 1.0) for s in range(total + 1)]
    assert all(0.0 <= x <= 1.0 for x in lrs)
    assert all(a <= b for a, b in zip(lrs[: warm + 1], lrs[1 : warm + 1]))
    assert all(a >= b for a, b in zip(lrs[warm:], lrs[warm + 1 :]))
