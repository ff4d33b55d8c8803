from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import fglora.tensor_core as tc
from fglora.params import FrozenParameterError, ParamStore
from fglora.tensor_core import AdamState, GraphError, MissingGradientError, ShapeError, Tensor

from gradcheck_cases import CASES, gradcheck_trials
from oracles import adam_single_step, conv3d_loops

finite = st.floats(-10, 10, allow_nan=False, width=64)


# ---------------------------------------------------------------- conv3d


def test_conv3d_scalar_kernel_scales():
    out = tc.conv3d(np.ones((1, 2, 2, 2)), np.full((1, 1, 1, 1, 1), 2.0))
    assert out.shape == (1, 2, 2, 2)
    assert np.all(out.data == 2.0)


def test_conv3d_sum_of_ones():
    out = tc.conv3d(np.ones((1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 27.0


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 0, 1), (1, 0, 1)])
def test_conv3d_matches_loop_reference(stride, padding, k):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 4, 4, 4))
    w = rng.normal(size=(3, 2, k, k, k))
    b = rng.normal(size=3)
    got = tc.conv3d(x, w, b, stride=stride, padding=padding).data
    want = conv3d_loops(x, w, b, stride, padding)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) < 1e-12


def test_conv3d_output_extent_formula():
    x = np.zeros((1, 7, 6, 5))
    out = tc.conv3d(x, np.zeros((2, 1, 3, 3, 3)), stride=2, padding=1)
    assert out.shape == (2, (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1, (5 + 2 - 3) // 2 + 1)


def test_conv3d_errors():
    with pytest.raises(ShapeError, match="channel"):
        tc.conv3d(np.zeros((2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))
    with pytest.raises(ValueError, match="stride"):
        tc.conv3d(np.zeros((1, 4, 4, 4)), np.zeros((1, 1, 3, 3, 3)), stride=0)
    with pytest.raises(ShapeError):
        tc.conv3d(np.zeros((1, 2, 2, 2)), np.zeros((1, 1, 3, 3, 3)))


def test_conv1x1_identity_zero_and_conv_equivalence():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4, 4, 4))
    assert np.array_equal(tc.conv1x1(x, np.eye(3)).data, x)
    assert np.all(tc.conv1x1(x, np.zeros((2, 3))).data == 0)
    w = rng.normal(size=(5, 3))
    ref = tc.conv3d(x, w.reshape(5, 3, 1, 1, 1)).data
    assert np.max(np.abs(tc.conv1x1(x, w).data - ref)) < 1e-12
    with pytest.raises(ShapeError):
        tc.conv1x1(x, np.zeros((2, 4)))


# ---------------------------------------------------------------- resampling and small ops


def test_upsample_examples():
    out = tc.upsample_nearest2x(np.array([[[[5.0]]]]))
    assert out.shape == (1, 2, 2, 2) and np.all(out.data == 5.0)


@given(arrays(np.float64, (2, 3, 2, 3), elements=finite))
def test_upsample_mass_and_roundtrip(x):
    up = tc.upsample_nearest2x(x).data
    assert math.isclose(up.sum(), 8 * x.sum(), rel_tol=1e-12, abs_tol=1e-9)
    assert np.array_equal(tc.downsample_stride2(up).data, x)


def test_relu_pool_linear():
    assert np.array_equal(tc.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])
    assert np.allclose(tc.global_avg_pool(np.full((3, 2, 2, 2), 1.5)).data, 1.5)
    v = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(tc.linear(v, np.eye(3), np.zeros(3)).data, v)
    with pytest.raises(ShapeError):
        tc.concat_channels([np.zeros((1, 2, 2, 2)), np.zeros((1, 3, 3, 3))])


# ---------------------------------------------------------------- losses


def test_dice_bce_perfect_prediction():
    loss = tc.dice_bce_loss(np.full((1, 2, 2, 2), 20.0), np.ones((1, 2, 2, 2)))
    assert loss.item() < 1e-6


def test_dice_bce_hand_value():
    total, dice_t, bce_t = tc.dice_bce_loss(np.zeros((1, 2, 2, 2)), np.ones((1, 2, 2, 2)), smooth=1.0,
                                            return_terms=True)
    assert math.isclose(bce_t.item(), math.log(2), rel_tol=1e-12)
    assert math.isclose(dice_t.item(), 1 - 9 / 13, rel_tol=1e-12)
    assert math.isclose(total.item(), math.log(2) + 4 / 13, rel_tol=1e-12)
    assert round(total.item(), 4) == 1.0008


@given(arrays(np.float64, (1, 2, 2, 2), elements=finite), st.integers(0, 255))
def test_dice_bce_nonnegative_and_decomposes(z, bits):
    t = np.array([(bits >> i) & 1 for i in range(8)], dtype=np.float64).reshape(1, 2, 2, 2)
    total, d, b = tc.dice_bce_loss(z, t, return_terms=True)
    assert total.item() >= 0
    assert total.item() == d.item() + b.item()


def test_dice_bce_rejects_bad_input():
    with pytest.raises(ValueError, match="only 0 and 1"):
        tc.dice_bce_loss(np.zeros(4), np.array([0.0, 0.5, 1.0, 1.0]))
    with pytest.raises(ValueError):
        tc.dice_bce_loss(np.zeros(4), np.ones(4), smooth=0.0)
    with pytest.raises(ShapeError):
        tc.dice_bce_loss(np.zeros(4), np.ones(3))


def test_bce_stays_finite_for_huge_logits():
    v = tc.bce_with_logits(np.array([1e4, -1e4]), np.array([0.0, 1.0])).item()
    assert np.isfinite(v) and math.isclose(v, 1e4)


def test_mse_examples():
    assert tc.mse_loss(np.ones(3), np.ones(3)).item() == 0.0
    assert tc.mse_loss(np.array([0.0]), np.array([2.0])).item() == 4.0
    with pytest.raises(ShapeError):
        tc.mse_loss(np.ones(3), np.ones(2))


# ---------------------------------------------------------------- autodiff


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradcheck(name):
    assert gradcheck_trials(name, n_trials=5, base_seed=1000) < 1e-4


def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    tc.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_unreachable_leaf_keeps_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    y.zero_grad()
    tc.tsum(tc.square(x)).backward()
    assert np.array_equal(y.grad, np.zeros(3))


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    tc.tsum(tc.mul(x, x) + x).backward()
    assert x.grad.item() == 7.0


def test_backward_is_bit_deterministic():
    rng = np.random.default_rng(5)
    xd, wd, yd = rng.normal(size=(2, 4, 4, 4)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=(3, 4, 4, 4))
    grads = []
    for _ in range(2):
        w = Tensor(wd, requires_grad=True)
        w.zero_grad()
        tc.mse_loss(tc.conv3d(xd, w, padding=1), yd).backward()
        grads.append(w.grad.copy())
    assert grads[0].tobytes() == grads[1].tobytes()


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        tc.mul(x, 2.0).backward()
    with pytest.raises(GraphError, match="detached"):
        tc.tsum(Tensor(np.ones(3))).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with tc.no_grad():
        y = tc.tsum(tc.square(x))
    assert not y.requires_grad


# ---------------------------------------------------------------- Adam


def test_adam_single_step_matches_hand_computation():
    store = ParamStore({"theta": np.array([1.0])})
    store["theta"].grad = np.array([1.0])
    state = AdamState(lr=1e-3)
    tc.adam_step(store, state)
    want = adam_single_step(1.0, 1.0, 1e-3, 0.9, 0.999, 1e-8)
    assert store["theta"].data.item() == want
    assert math.isclose(want, 0.999, abs_tol=1e-9)
    assert state.step_count == 1


def test_adam_zero_grad_leaves_params_and_moments():
    store = ParamStore({"a": np.arange(4.0)})
    store.zero_grad()
    state = AdamState()
    tc.adam_step(store, state)
    assert np.array_equal(store["a"].data, np.arange(4.0))
    assert np.all(state.first_moment["a"] == 0) and np.all(state.second_moment["a"] == 0)
    assert state.step_count == 1
    assert state.first_moment["a"].shape == store["a"].shape


def test_adam_refuses_frozen_and_missing_grads():
    store = ParamStore({"a": np.ones(2), "b": np.ones(2)})
    store.zero_grad()
    before = store.hashes()
    store["b"].requires_grad = False
    with pytest.raises(FrozenParameterError):
        tc.adam_step(store, AdamState())
    assert store.hashes() == before
    fresh = ParamStore({"a": np.ones(2)})
    with pytest.raises(MissingGradientError):
        tc.adam_step(fresh, AdamState())


def test_adam_state_validation():
    for kwargs in ({"lr": 0.0}, {"beta1": 1.0}, {"beta2": 0.0}, {"epsilon": 0.0}):
        with pytest.raises(ValueError):
            AdamState(**kwargs)


def test_no_nonfinite_after_passes_on_finite_inputs():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)) * 50, requires_grad=True)
    w = Tensor(rng.normal(size=(1, 2, 3, 3, 3)), requires_grad=True)
    z = tc.conv3d(x, w, padding=1)
    loss = tc.dice_bce_loss(z, (rng.uniform(size=z.shape) < 0.3).astype(float))
    loss.backward()
    for arr in (z.data, loss.data, x.grad, w.grad):
        assert np.all(np.isfinite(arr))
