"""Adam update semantics against a scalar reference implementation."""

import numpy as np
import pytest

from uwrestore import autodiff as ad
from uwrestore.errors import NumericsError
from uwrestore.optim import AdamState, adam_step

import oracles


def _param(values, grad=None):
    p = ad.Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
    if grad is not None:
        p.grad = np.asarray(grad, dtype=np.float64)
    return p


def test_zero_gradient_keeps_parameters():
    p = _param([1.0, -2.0, 3.0], [0.0, 0.0, 0.0])
    state = AdamState(lr=0.1)
    adam_step({"p": p}, state)
    assert state.t == 1
    assert np.array_equal(p.data, [1.0, -2.0, 3.0])


def test_missing_gradient_counts_as_zero():
    p = _param([0.5])
    state = AdamState(lr=0.1)
    adam_step({"p": p}, state)
    assert state.t == 1
    assert np.array_equal(p.data, [0.5])


def test_first_step_moves_by_lr_sign():
    # Bias correction makes the first update -lr * g / (|g| + eps).
    p = _param([1.0, 1.0, 1.0], [0.3, -5.0, 40.0])
    adam_step({"p": p}, AdamState(lr=0.01))
    assert np.allclose(p.data, [1.0 - 0.01, 1.0 + 0.01, 1.0 - 0.01], atol=1e-6)


def test_quadratic_descent_matches_scalar_reference():
    # Minimize (x - 3)^2 from 0; compare the whole trajectory elementwise.
    traj = oracles.adam_scalar(0.0, lambda x: 2.0 * (x - 3.0), lr=0.1, steps=50)
    assert abs(traj[-1] - 3.0) < 0.5

    p = _param([0.0])
    state = AdamState(lr=0.1)
    for t in range(50):
        p.grad = np.array([2.0 * (p.data[0] - 3.0)])
        adam_step({"p": p}, state)
        assert np.isclose(p.data[0], traj[t + 1], atol=1e-12), f"diverged at step {t}"


def test_state_tracks_multiple_parameters():
    a = _param(np.zeros((2, 2)), np.ones((2, 2)))
    b = _param(np.zeros(3), np.full(3, -1.0))
    state = AdamState(lr=0.5)
    adam_step({"a": a, "b": b}, state)
    assert set(state.m) == {"a", "b"}
    assert state.m["a"].shape == (2, 2)
    assert np.all(state.v["b"] >= 0)


def test_non_finite_gradient_aborts_naming_parameter():
    good = _param([1.0], [0.1])
    bad = _param([1.0], [np.nan])
    state = AdamState(lr=0.1)
    with pytest.raises(NumericsError, match="drb.3.conv2.weight"):
        adam_step({"ok": good, "drb.3.conv2.weight": bad}, state)
    # the abort happens before any parameter moves
    assert good.data[0] == 1.0 and state.t == 0
