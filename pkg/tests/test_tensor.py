import math

import numpy as np
import pytest

from vitdp import tensor as T
from vitdp.errors import DimensionError, InputError, NonFiniteError, UsageError
from vitdp.tensor import Tape, Tensor

from oracles import naive_matmul


def arr(x, dtype=np.float64):
    return np.asarray(x, dtype=dtype)


# -- matmul -------------------------------------------------------------


def test_matmul_identity():
    a = Tensor(arr([[1, 2], [3, 4]]))
    assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_hand_case():
    out = T.matmul(Tensor(arr([[1, 0], [0, 0]])), Tensor(arr([[0, 1], [1, 0]])))
    assert np.array_equal(out.data, [[0, 1], [0, 0]])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_matmul_matches_triple_loop_exactly(dtype):
    rng = np.random.default_rng(7)
    a = rng.standard_normal((4, 4)).astype(dtype)
    b = rng.standard_normal((4, 4)).astype(dtype)
    got = T.matmul_arrays(a, b)
    assert got.dtype == dtype
    assert np.array_equal(got, naive_matmul(a, b))


def test_matmul_batched_and_rectangular():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 3, 5)).astype(np.float32)
    b = rng.standard_normal((2, 5, 4)).astype(np.float32)
    got = T.matmul_arrays(a, b)
    for i in range(2):
        assert np.array_equal(got[i], naive_matmul(a[i], b[i]))


@pytest.mark.parametrize("sa,sb", [((2, 3), (2, 3)), ((2, 2, 3), (3, 2, 2)), ((3,), (3, 1))])
def test_matmul_shape_mismatch(sa, sb):
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones(sa)), Tensor(np.ones(sb)))


# -- elementwise --------------------------------------------------------


def test_add_zeros_identity():
    x = Tensor(arr([1.5, -2, 3]))
    assert np.array_equal(T.add(x, Tensor(np.zeros(3))).data, x.data)


def test_scale_zero():
    assert np.array_equal(T.scale(Tensor(arr([1.5, -2, 3])), 0.0).data, np.zeros(3))


def test_mul_hand_case():
    assert np.array_equal(T.mul(Tensor(arr([1, 2, 3])), Tensor(arr([4, 5, 6]))).data, [4, 10, 18])


@pytest.mark.parametrize("kind,expected", [("add", [5, 7, 9]), ("sub", [-3, -3, -3]), ("mul", [4, 10, 18])])
def test_elementwise_dispatch(kind, expected):
    assert np.array_equal(T.elementwise(kind, arr([1, 2, 3]), arr([4, 5, 6])).data, expected)


def test_elementwise_scale_scalar():
    assert np.array_equal(T.elementwise("scale", arr([1, 2]), 3.0).data, [3, 6])


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.ones((2, 2))), Tensor(np.ones(4)))


# -- softmax / layer norm / gelu ----------------------------------------


def test_softmax_uniform():
    assert np.allclose(T.softmax(Tensor(np.zeros(4))).data, 0.25)


def test_softmax_large_input_stable():
    out = T.softmax(Tensor(arr([1000.0, 0.0]))).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_shift_invariance():
    x = np.random.default_rng(0).standard_normal((3, 6))
    assert np.allclose(T.softmax(Tensor(x + 17.5)).data, T.softmax(Tensor(x)).data, atol=1e-6)


def test_layer_norm_constant_row():
    out = T.layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_layer_norm_normalized_row():
    out = T.layer_norm(Tensor(arr([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-9)


def test_layer_norm_row_mean_equals_bias_mean():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 8)) * 4 + 2
    bias = rng.standard_normal(8)
    out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(bias)).data
    assert np.allclose(out.mean(axis=-1), bias.mean(), atol=1e-6)


def test_gelu_points():
    out = T.gelu(Tensor(arr([0.0, 10.0, -10.0]))).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(10.0, abs=1e-6)
    assert out[2] == pytest.approx(0.0, abs=1e-6)


# -- cross entropy -------------------------------------------------------


def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy(Tensor(np.zeros((4, 10))), np.arange(4)).item()
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert loss == pytest.approx(2.3026, abs=1e-4)


def test_cross_entropy_confident_correct():
    logits = np.zeros((1, 10))
    logits[0, 3] = 50.0
    assert T.cross_entropy(Tensor(logits), [3]).item() < 1e-6


def test_cross_entropy_batch_mean_invariance():
    row = np.random.default_rng(0).standard_normal((1, 5))
    one = T.cross_entropy(Tensor(row), [2]).item()
    two = T.cross_entropy(Tensor(np.vstack([row, row])), [2, 2]).item()
    assert two == pytest.approx(one, abs=1e-15)


@pytest.mark.parametrize("labels", [[10], [-1]])
def test_cross_entropy_label_range(labels):
    with pytest.raises(InputError):
        T.cross_entropy(Tensor(np.zeros((1, 10))), labels)


# -- backward ------------------------------------------------------------


def test_backward_sum_gives_ones():
    with Tape() as tape:
        x = tape.watch(Tensor(np.random.default_rng(0).standard_normal((3, 4))))
        T.backward(tape, T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic():
    v = np.random.default_rng(1).standard_normal((5, 1))
    with Tape() as tape:
        x = tape.watch(Tensor(v))
        loss = T.scale(T.matmul(T.transpose(x, (1, 0)), x), 0.5)
        T.backward(tape, T.reshape(loss, ()))
    assert np.allclose(x.grad, v, atol=1e-14)


def test_backward_rejects_non_scalar():
    with Tape() as tape:
        x = tape.watch(Tensor(np.ones(3)))
        with pytest.raises(UsageError):
            T.backward(tape, T.scale(x, 2.0))


def test_backward_shared_input_accumulates():
    with Tape() as tape:
        x = tape.watch(Tensor(arr([1.0, 2.0])))
        T.backward(tape, T.sum_all(T.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_visits_each_record_once_in_reverse():
    visited = []
    with Tape() as tape:
        x = tape.watch(Tensor(arr([1.0, 2.0])))
        y = T.scale(x, 3.0)
        z = T.add(y, x)
        loss = T.sum_all(z)
        for rec in tape.records:
            orig = rec.backward

            def spy(g, needs, _orig=orig, _rec=rec):
                visited.append(_rec.output)
                return _orig(g, needs)

            rec.backward = spy
        T.backward(tape, loss)
    outputs = [rec.output for rec in tape.records]
    assert visited == outputs[::-1]
    assert np.allclose(x.grad, [4.0, 4.0])


def test_untracked_ops_are_not_recorded():
    with Tape() as tape:
        T.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
        assert tape.records == []


def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.mul(Tensor(arr([1e200])), Tensor(arr([1e200])))


def test_item_requires_single_element():
    with pytest.raises(UsageError):
        Tensor(np.ones(2)).item()
