import numpy as np
import pytest

from resbuilder.optim import AdamState, adam_step


def test_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert p["w"].tolist() == [1.0, -2.0]


def test_constant_gradient_step_tends_to_lr():
    state = AdamState(lr=1e-3)
    p = {"w": np.zeros(3)}
    g = {"w": np.array([0.5, -2.0, 1e-3])}
    for _ in range(2000):
        before = p["w"].copy()
        adam_step(p, g, state)
    step = np.abs(p["w"] - before)
    np.testing.assert_allclose(step, 1e-3, rtol=1e-3)
    assert state.step == 2000


def test_first_step_is_lr_times_sign():
    p = {"w": np.array([0.0, 0.0])}
    adam_step(p, {"w": np.array([3.0, -0.01])}, AdamState(lr=0.1))
    np.testing.assert_allclose(p["w"], [-0.1, 0.1], rtol=1e-5)


def test_identical_inputs_identical_updates(rng):
    g = rng.normal(size=(4, 4))
    a, b = {"w": rng.normal(size=(4, 4))}, {}
    b["w"] = a["w"].copy()
    sa, sb = AdamState(), AdamState()
    for _ in range(5):
        adam_step(a, {"w": g}, sa)
        adam_step(b, {"w": g}, sb)
    assert a["w"].tobytes() == b["w"].tobytes()


def test_missing_gradient_skipped_and_shape_checked():
    p = {"a": np.ones(2), "b": np.ones(2)}
    adam_step(p, {"a": np.ones(2)}, AdamState())
    assert p["b"].tolist() == [1.0, 1.0]
    with pytest.raises(ValueError):
        adam_step(p, {"a": np.ones(3)}, AdamState())
