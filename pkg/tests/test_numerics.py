import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schema_infer.numerics import (
    AdamWState,
    CosineSchedule,
    SeededRng,
    adamw_step,
    finite_diff_check,
    gaussian_matrix,
    layer_norm,
    softmax_row,
)


def test_gaussian_matrix_deterministic():
    a = gaussian_matrix(SeededRng(123), 2, 2)
    b = gaussian_matrix(SeededRng(123), 2, 2)
    assert np.array_equal(a, b)


def test_gaussian_matrix_split_streams_differ_but_reproduce():
    kids = SeededRng(7).split(3)
    again = SeededRng(7).split(3)
    draws = [k.normal(4) for k in kids]
    redraws = [k.normal(4) for k in again]
    for d, r in zip(draws, redraws):
        assert np.array_equal(d, r)
    assert not np.array_equal(draws[0], draws[1])


def test_gaussian_matrix_law_of_large_numbers():
    # sample mean within 4/sqrt(N) of 0, variance within 5% of 1
    samples = gaussian_matrix(SeededRng(99), 100_000, 1).ravel()
    assert abs(samples.mean()) < 4.0 / math.sqrt(samples.size)
    assert abs(samples.var() - 1.0) < 0.05


def test_gaussian_matrix_rejects_empty_shape():
    with pytest.raises(ValueError):
        gaussian_matrix(SeededRng(0), 0, 3)


def test_softmax_symmetry_cases():
    assert np.allclose(softmax_row(np.array([0.0, 0.0])), [0.5, 0.5])
    assert np.allclose(softmax_row(np.array([3.3, 3.3, 3.3])), np.full(3, 1 / 3))


def test_softmax_reference_values():
    # frozen from a 40-digit evaluation of exp(x_i)/sum exp
    expected = np.array(
        [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
    )
    assert np.allclose(softmax_row(np.array([1.0, 2.0, 3.0])), expected, atol=1e-15)


def test_softmax_shift_invariance():
    x = np.array([1.0, -2.0, 0.5, 700.0])
    assert np.allclose(softmax_row(x), softmax_row(x - 700.0))


@settings(max_examples=200)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12))
def test_softmax_sums_to_one(xs):
    out = softmax_row(np.array(xs))
    assert out.min() > 0
    assert abs(out.sum() - 1.0) < 1e-12


def test_layer_norm_constant_row():
    out = layer_norm(np.array([[1.0, 1.0, 1.0]]), np.ones(3), np.zeros(3))
    assert np.allclose(out, 0.0)


def test_layer_norm_two_point_row():
    out = layer_norm(np.array([[0.0, 2.0]]), np.ones(2), np.zeros(2))
    assert np.allclose(out, [-1.0, 1.0], atol=1e-5)


def test_layer_norm_affine():
    out = layer_norm(np.array([[0.0, 2.0]]), np.full(2, 3.0), np.array([1.0, -1.0]))
    assert np.allclose(out, [-3.0 + 1.0, 3.0 - 1.0], atol=1e-4)


def test_layer_norm_rejects_bad_affine_shape():
    with pytest.raises(ValueError):
        layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))


@settings(max_examples=200)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_layer_norm_row_statistics(seed):
    row = SeededRng(seed).normal((1, 32))
    out = layer_norm(row, np.ones(32), np.zeros(32))
    assert abs(out.mean()) < 1e-6
    assert abs(out.var() - 1.0) < 1e-4


def test_cosine_schedule_endpoints_and_midpoint():
    s = CosineSchedule(base=1e-3, minimum=1e-5, total=100)
    assert s.lr(0) == pytest.approx(1e-3, abs=0)
    assert s.lr(100) == pytest.approx(1e-5, abs=1e-20)
    assert s.lr(50) == pytest.approx(1e-5 + 0.5 * (1e-3 - 1e-5), rel=1e-12)


def test_cosine_schedule_nonincreasing():
    s = CosineSchedule(base=0.1, minimum=0.0, total=37)
    lrs = [s.lr(t) for t in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adamw_zero_grad_zero_decay_is_identity():
    state = AdamWState(lr=1e-3, weight_decay=0.0)
    p = {"w": np.array([1.0, -2.0, 3.0])}
    before = p["w"].copy()
    adamw_step(state, p, {"w": np.zeros(3)})
    assert np.array_equal(p["w"], before)


def test_adamw_lr_zero_changes_nothing():
    state = AdamWState(lr=0.0, weight_decay=5e-4)
    p = {"w": np.array([1.0, -2.0])}
    before = p["w"].copy()
    adamw_step(state, p, {"w": np.array([0.3, -0.7])}, lr=0.0)
    assert np.array_equal(p["w"], before)


@pytest.mark.parametrize(
    "weight_decay,expected",
    [
        # frozen single-step hand derivations: p0=1, g=1, lr=1e-3,
        # m_hat = v_hat = 1 after bias correction at t=1
        (0.0, 0.9990000000099999999),
        (5e-4, 0.9989995000099999999),
    ],
)
def test_adamw_single_step_matches_hand_derivation(weight_decay, expected):
    state = AdamWState(lr=1e-3, weight_decay=weight_decay)
    p = {"w": np.array([1.0])}
    adamw_step(state, p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(expected, abs=1e-15)


def test_adamw_identical_params_get_identical_updates():
    state = AdamWState(lr=1e-3, weight_decay=5e-4)
    p = {"a": np.array([0.7]), "b": np.array([0.7])}
    adamw_step(state, p, {"a": np.array([0.2]), "b": np.array([0.2])})
    assert p["a"][0] == p["b"][0]


def test_adamw_shape_mismatch_errors():
    state = AdamWState()
    with pytest.raises(ValueError):
        adamw_step(state, {"w": np.zeros(3)}, {"w": np.zeros(2)})


def test_finite_diff_quadratic():
    p = {"x": np.array([1.0, -2.0, 0.5])}

    def loss(params):
        return 0.5 * float(np.sum(params["x"] ** 2))

    report = finite_diff_check(loss, p, {"x": p["x"].copy()}, step=1e-6, tol=1e-8)
    assert report.passed
    assert report.max_rel_err < 1e-8


def test_finite_diff_linear():
    c = np.array([2.0, -1.0, 0.25])
    p = {"x": np.array([0.3, 0.1, -0.7])}

    def loss(params):
        return float(c @ params["x"])

    report = finite_diff_check(loss, p, {"x": c.copy()}, step=1e-6, tol=1e-10)
    assert report.max_rel_err < 1e-10


def test_finite_diff_flags_wrong_gradient():
    p = {"x": np.array([1.0])}

    def loss(params):
        return float(params["x"][0] ** 2)

    report = finite_diff_check(loss, p, {"x": np.array([1.0])}, tol=1e-4)
    assert not report.passed
    assert report.worst_param == "x"
