"""Autodiff engine: forward values against numpy, hand-derived gradients,
broadcasting rules, and the permutation-stable reduction."""

import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mamt4 import tensor as T
from mamt4.errors import (
    DomainError,
    InvalidAxis,
    InvalidShape,
    NotScalar,
    ShapeMismatch,
)

finite = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False)


def arrays(shape, elements=finite):
    return hnp.arrays(np.float64, shape, elements=elements)


# ---------------------------------------------------------------------------
# construction

def test_tensor_is_float64_copy():
    src = np.array([1, 2, 3], dtype=np.int32)
    t = T.tensor(src)
    assert t.values.dtype == np.float64
    src[0] = 99
    assert t.values[0] == 1.0


def test_factories():
    assert np.array_equal(T.zeros((2, 3)).values, np.zeros((2, 3)))
    assert np.array_equal(T.ones((4,)).values, np.ones(4))
    assert np.array_equal(T.full((2,), 0.5).values, np.full(2, 0.5))


def test_uniform_deterministic():
    a = T.uniform((3, 3), -1.0, 1.0, seed=9)
    b = T.uniform((3, 3), -1.0, 1.0, seed=9)
    c = T.uniform((3, 3), -1.0, 1.0, seed=10)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.values.min() >= -1.0 and a.values.max() < 1.0


def test_uniform_rejects_reversed_bounds():
    with pytest.raises(DomainError):
        T.uniform((2,), 1.0, -1.0, seed=0)


def test_gaussian_rejects_negative_sigma():
    with pytest.raises(DomainError):
        T.gaussian((2,), 0.0, -0.1, seed=0)


def test_invalid_shape_rejected():
    with pytest.raises(InvalidShape):
        T.zeros((2, -1))


# ---------------------------------------------------------------------------
# elementwise forward

def test_add_sub_mul_values():
    a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.tensor([10.0, 20.0])
    assert np.array_equal(T.add(a, b).values, [[11.0, 22.0], [13.0, 24.0]])
    assert np.array_equal(T.sub(a, b).values, [[-9.0, -18.0], [-7.0, -16.0]])
    assert np.array_equal(T.mul(a, b).values, [[10.0, 40.0], [30.0, 80.0]])
    assert np.array_equal(T.neg(a).values, -a.values)


def test_broadcast_requires_trailing_suffix():
    a = T.tensor(np.zeros((2, 3, 4)))
    assert T.add(a, T.tensor(np.ones(4))).shape == (2, 3, 4)
    assert T.add(a, T.tensor(np.ones((3, 4)))).shape == (2, 3, 4)
    # numpy would broadcast (1, 4), suffix-only rule refuses it
    with pytest.raises(ShapeMismatch):
        T.add(a, T.tensor(np.ones((1, 4))))
    with pytest.raises(ShapeMismatch):
        T.add(T.tensor(np.zeros((3, 2))), T.tensor(np.ones(3)))


def test_operator_sugar():
    x = T.tensor([1.0, 2.0])
    assert np.array_equal((x + 1.0).values, [2.0, 3.0])
    assert np.array_equal((1.0 - x).values, [0.0, -1.0])
    assert np.array_equal((x * 2.0).values, [2.0, 4.0])
    assert np.array_equal((-x).values, [-1.0, -2.0])


def test_activation_hand_values():
    assert T.sigmoid(T.tensor(0.0)).item() == pytest.approx(0.5, abs=1e-15)
    assert T.gelu(T.tensor(0.0)).item() == 0.0
    # tanh-approximation value at x = 3
    x = 3.0
    inner = math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)
    expected = 0.5 * x * (1.0 + math.tanh(inner))
    assert T.gelu(T.tensor(x)).item() == pytest.approx(expected, abs=1e-15)
    assert abs(T.gelu(T.tensor(-10.0)).item()) < 1e-6


def test_log_rejects_nonpositive():
    with pytest.raises(DomainError):
        T.log(T.tensor([1.0, 0.0]))


def test_clamp_values():
    x = T.tensor([-2.0, -0.5, 0.5, 2.0])
    assert np.array_equal(T.clamp(x, -1.0, 1.0).values, [-1.0, -0.5, 0.5, 1.0])


def test_powc_values():
    x = T.tensor([1.0, 4.0, 9.0])
    assert np.allclose(T.powc(x, 0.5).values, [1.0, 2.0, 3.0], atol=1e-15)


# ---------------------------------------------------------------------------
# matmul

def test_matmul_hand_value():
    a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal((a @ b).values, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(3)
    av = rng.uniform(-1, 1, (3, 4))
    bv = rng.uniform(-1, 1, (4, 5))
    want = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                want[i, j] += av[i, k] * bv[k, j]
    got = T.matmul(T.tensor(av), T.tensor(bv)).values
    assert np.allclose(got, want, atol=1e-12)


def test_matmul_batched_and_mixed_rank():
    rng = np.random.default_rng(4)
    a = rng.uniform(-1, 1, (2, 3, 4))
    b = rng.uniform(-1, 1, (2, 4, 5))
    w = rng.uniform(-1, 1, (4, 5))
    assert np.allclose(T.matmul(T.tensor(a), T.tensor(b)).values, a @ b, atol=1e-12)
    assert np.allclose(T.matmul(T.tensor(a), T.tensor(w)).values, a @ w, atol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(ShapeMismatch):
        T.matmul(T.tensor([1.0, 2.0]), T.tensor([[1.0], [2.0]]))
    with pytest.raises(ShapeMismatch):
        T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeMismatch):
        T.matmul(T.tensor(np.zeros((2, 3, 4))), T.tensor(np.zeros((3, 4, 5))))


# ---------------------------------------------------------------------------
# reductions and shape ops

def test_reduce_sum_axis_and_full():
    x = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.reduce_sum(x, axis=0).values, [4.0, 6.0])
    assert np.array_equal(T.reduce_sum(x, axis=1).values, [3.0, 7.0])
    assert T.reduce_sum(x).item() == 10.0
    assert T.reduce_mean(x).item() == 2.5
    with pytest.raises(InvalidAxis):
        T.reduce_sum(x, axis=5)


def test_softmax_rows():
    x = T.tensor([[0.0, 0.0], [1.0, 3.0]])
    got = T.softmax(x, axis=-1).values
    assert np.allclose(got.sum(axis=-1), 1.0, atol=1e-15)
    assert np.allclose(got[0], [0.5, 0.5], atol=1e-15)
    # shift invariance of the stabilized form
    shifted = T.softmax(T.tensor(x.values + 100.0), axis=-1).values
    assert np.allclose(got, shifted, atol=1e-12)


def test_reshape_token_split():
    flat = T.tensor(np.arange(1536, dtype=np.float64))
    tokens = T.reshape(flat, (8, 192))
    assert tokens.shape == (8, 192)
    assert tokens.values[1, 0] == 192.0
    with pytest.raises(ShapeMismatch):
        T.reshape(flat, (8, 100))
    with pytest.raises(InvalidShape):
        T.reshape(flat, (-8, 192))


def test_concat_fuses_view_tokens():
    views = [T.tensor(np.full((8, 192), float(i))) for i in range(4)]
    fused = T.concat(views, axis=0)
    assert fused.shape == (32, 192)
    assert fused.values[8, 0] == 1.0 and fused.values[31, 0] == 3.0
    with pytest.raises(ShapeMismatch):
        T.concat([views[0], T.tensor(np.zeros((8, 100)))], axis=0)
    with pytest.raises(InvalidAxis):
        T.concat(views, axis=5)


def test_transpose2d_involution():
    x = T.tensor(np.arange(12, dtype=np.float64).reshape(3, 4))
    assert np.array_equal(T.transpose2d(T.transpose2d(x)).values, x.values)
    with pytest.raises(InvalidShape):
        T.transpose2d(T.tensor([1.0, 2.0]))


def test_slice_axis_bounds():
    x = T.tensor(np.arange(10, dtype=np.float64).reshape(2, 5))
    assert np.array_equal(T.slice_axis(x, 1, 1, 3).values, [[1.0, 2.0], [6.0, 7.0]])
    with pytest.raises(InvalidShape):
        T.slice_axis(x, 1, 3, 3)
    with pytest.raises(InvalidAxis):
        T.slice_axis(x, 2, 0, 1)


def test_sorted_sum_permutation_bit_exact():
    rng = np.random.default_rng(11)
    x = rng.uniform(-1, 1, (9, 5))
    perm = rng.permutation(9)
    a = T.sorted_sum(x, axis=0)
    b = T.sorted_sum(x[perm], axis=0)
    assert np.array_equal(a, b)
    assert np.allclose(a, x.sum(axis=0), atol=1e-12)


# ---------------------------------------------------------------------------
# backward

def _leaf(values):
    return T.Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_backward_sum_gives_ones():
    x = _leaf([[1.0, 2.0], [3.0, 4.0]])
    T.backward(T.reduce_sum(x))
    assert np.array_equal(x.grad, np.ones((2, 2)))


def test_backward_square_gives_two_x():
    x = _leaf([1.0, -2.0, 3.0])
    T.backward(T.reduce_sum(T.mul(x, x)))
    assert np.allclose(x.grad, 2.0 * x.values, atol=1e-15)


def test_backward_sigmoid_at_zero():
    x = _leaf(0.0)
    T.backward(T.sigmoid(x))
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_backward_broadcast_reduces_grad():
    x = _leaf(np.ones((2, 3)))
    b = _leaf(np.zeros(3))
    T.backward(T.reduce_sum(T.add(x, b)))
    assert np.array_equal(b.grad, np.full(3, 2.0))


def test_backward_requires_scalar():
    x = _leaf([1.0, 2.0])
    with pytest.raises(NotScalar):
        T.backward(T.mul(x, x))


def test_grad_accumulates_and_clears():
    x = _leaf([1.0, 2.0])
    T.backward(T.reduce_sum(x))
    T.backward(T.reduce_sum(T.mul(x, x)))
    assert np.allclose(x.grad, 1.0 + 2.0 * x.values, atol=1e-15)
    x.zero_grad()
    assert x.grad is None


def test_diamond_graph_accumulation():
    x = _leaf(2.0)
    y = T.add(T.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1
    T.backward(y)
    assert x.grad == pytest.approx(5.0, abs=1e-12)


def test_clamp_gradient_mask():
    x = _leaf([-2.0, 0.0, 2.0])
    T.backward(T.reduce_sum(T.clamp(x, -1.0, 1.0)))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_no_grad_suppresses_graph():
    x = _leaf([1.0, 2.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert y.node is None
    z = T.mul(x, x)
    assert z.node is not None


def test_detach_breaks_graph():
    x = _leaf([1.0, 2.0])
    y = T.mul(x, x).detach()
    assert y.node is None and not y.requires_grad


def test_finite_diff_check_is_strict():
    err = T.finite_diff_check(lambda t: T.reduce_sum(T.mul(t, t)),
                              T.tensor([0.3, -0.7, 1.1]))
    assert err < 1e-8
    with pytest.raises(NotScalar):
        T.finite_diff_check(lambda t: t, T.tensor([1.0, 2.0]))


# ---------------------------------------------------------------------------
# properties

@given(arrays((3, 4)), arrays((4,)))
def test_add_matches_numpy(a, b):
    assert np.array_equal(T.add(T.tensor(a), T.tensor(b)).values, a + b)


@given(arrays((3, 4)), arrays((3, 4)))
def test_mul_matches_numpy(a, b):
    assert np.array_equal(T.mul(T.tensor(a), T.tensor(b)).values, a * b)


@given(arrays((3, 4)))
def test_reduce_sum_matches_numpy(a):
    got = T.reduce_sum(T.tensor(a), axis=0).values
    assert np.allclose(got, a.sum(axis=0), atol=1e-9)


@given(arrays((4, 5)))
def test_softmax_rows_sum_to_one(a):
    got = T.softmax(T.tensor(a), axis=-1).values
    assert np.allclose(got.sum(axis=-1), 1.0, atol=1e-12)
    assert got.min() >= 0.0


@given(arrays((3, 6)))
def test_layer_norm_standardizes_rows(a):
    assume(float(a.std(axis=-1).min()) > 0.1)  # constant rows stay zero
    out = T.layer_norm(T.tensor(a), T.ones(6), T.zeros(6)).values
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    # unit variance up to the eps regularizer
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-3)
