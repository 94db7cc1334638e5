"""Tensor core: op semantics, gradient correctness, tape discipline."""

import numpy as np
import pytest

from d3gzsl import tensor as T
from d3gzsl.errors import DegenerateInputError, ParameterError, ShapeError, TapeError
from d3gzsl.tensor import Tensor

from gradcheck import assert_grads_match

N_POINTS = 10


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# forward semantics


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(eye, m).data, m.data)


def test_matmul_unit_basis_row():
    out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]]))
    assert out.data.tolist() == [[2.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))
    assert "(3, 4)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_softmax_symmetric_row():
    out = T.softmax_rows(Tensor([[0.0, 0.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-12)


def test_softmax_direct_value():
    out = T.softmax_rows(Tensor([[np.log(3.0), 0.0]]))
    assert np.allclose(out.data, [[0.75, 0.25]], atol=1e-12)


def test_softmax_rows_sum_to_one_and_bounded():
    rng = np.random.default_rng(0)
    v = Tensor(rng.standard_normal((40, 7)) * 30)
    out = T.softmax_rows(v, temperature=2.5).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-9)
    assert np.all(out > 0) and np.all(out < 1)


def test_softmax_rejects_bad_temperature():
    with pytest.raises(ParameterError):
        T.softmax_rows(Tensor([[1.0, 2.0]]), temperature=0.0)
    with pytest.raises(ParameterError):
        T.softmax_rows(Tensor([[1.0, 2.0]]), temperature=-1.0)


def test_l2_normalize_values():
    out = T.l2_normalize_rows(Tensor([[3.0, 4.0], [2.0, 0.0]]))
    assert np.allclose(out.data, [[0.6, 0.8], [1.0, 0.0]], atol=1e-12)


def test_l2_normalize_unit_vector_fixed_point():
    v = np.array([[1 / np.sqrt(2), -1 / np.sqrt(2)]])
    assert np.allclose(T.l2_normalize_rows(Tensor(v)).data, v, atol=1e-12)


def test_l2_normalize_row_norms():
    rng = np.random.default_rng(1)
    out = T.l2_normalize_rows(Tensor(rng.standard_normal((30, 9)))).data
    assert np.all(np.abs(np.linalg.norm(out, axis=1) - 1.0) < 1e-9)


def test_l2_normalize_rejects_near_zero_row():
    with pytest.raises(DegenerateInputError):
        T.l2_normalize_rows(Tensor([[1.0, 0.0], [1e-12, 0.0]]))


def test_cosine_matrix_self_similarity_and_orthogonality():
    p = Tensor([[1.0, 0.0], [0.0, 2.0]])
    out = T.cosine_similarity_matrix(p, p).data
    assert np.allclose(np.diag(out), 1.0, atol=1e-12)
    assert np.allclose(out[0, 1], 0.0, atol=1e-12)
    assert np.allclose(out, out.T, atol=1e-12)


def test_cosine_matrix_known_value():
    out = T.cosine_similarity_matrix(Tensor([[1.0, 1.0]]), Tensor([[1.0, 0.0]]))
    assert abs(out.data[0, 0] - 0.70711) < 5e-6


def test_cosine_matrix_entries_bounded():
    rng = np.random.default_rng(2)
    p = Tensor(rng.standard_normal((12, 5)))
    q = Tensor(rng.standard_normal((12, 5)))
    out = T.cosine_similarity_matrix(p, q).data
    assert np.all(out >= -1 - 1e-9) and np.all(out <= 1 + 1e-9)


def test_cosine_matrix_shape_mismatch():
    with pytest.raises(ShapeError):
        T.cosine_similarity_matrix(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


# ---------------------------------------------------------------------------
# backward semantics


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.backward(T.reduce_sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.reduce_sum(T.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0], atol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.mul(x, x))


def test_backward_rejects_constant_loss():
    with pytest.raises(TapeError):
        T.backward(T.reduce_sum(Tensor(np.ones(3))))


def test_double_backward_same_tape_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.reduce_sum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(TapeError):
        T.backward(loss)


def test_grads_accumulate_across_tapes_until_reset():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.reduce_sum(T.mul(x, x)))
    T.backward(T.reduce_sum(T.mul(x, x)))
    assert np.allclose(x.grad, [12.0])  # 6 + 6
    x.grad = None
    T.backward(T.reduce_sum(T.mul(x, x)))
    assert np.allclose(x.grad, [6.0])


def test_stale_intermediate_rejected_on_new_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.reduce_sum(y))
    with pytest.raises(TapeError):
        T.reduce_sum(T.mul(y, y))


def test_no_grad_blocks_recording():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._tape is None


def test_detach_stops_gradient():
    x = Tensor([2.0], requires_grad=True)
    T.backward(T.reduce_sum(T.mul(x.detach(), x)))
    assert np.allclose(x.grad, [2.0])  # only the live branch contributes


# ---------------------------------------------------------------------------
# finite-difference suite over every differentiable op


def _fd_cases(rng):
    a = _rand(rng, 3, 4)
    b = _rand(rng, 3, 4)
    m1 = _rand(rng, 3, 4)
    m2 = _rand(rng, 4, 2)
    col = _rand(rng, 3, 1)
    row = _rand(rng, 1, 4)
    scal = _rand(rng)
    pos = Tensor(np.abs(rng.standard_normal((3, 4))) + 0.5, requires_grad=True)
    cases = {
        "add": (lambda: T.reduce_sum(T.mul(T.add(a, b), T.add(a, b))), [a, b]),
        "add_row_broadcast": (lambda: T.reduce_sum(T.mul(T.add(a, row), T.add(a, row))), [a, row]),
        "sub": (lambda: T.reduce_sum(T.mul(T.sub(a, b), a)), [a, b]),
        "mul": (lambda: T.reduce_sum(T.mul(a, b)), [a, b]),
        "mul_col_broadcast": (lambda: T.reduce_sum(T.mul(a, col)), [a, col]),
        "mul_scalar": (lambda: T.reduce_sum(T.mul(a, scal)), [a, scal]),
        "div": (lambda: T.reduce_sum(T.div(a, pos)), [a, pos]),
        "neg": (lambda: T.reduce_sum(T.mul(T.neg(a), b)), [a]),
        "matmul": (lambda: T.reduce_sum(T.matmul(m1, m2)), [m1, m2]),
        "matmul_quadratic": (
            lambda: T.reduce_sum(T.mul(T.matmul(m1, m2), T.matmul(m1, m2))),
            [m1, m2],
        ),
        "transpose": (lambda: T.reduce_sum(T.mul(T.transpose(m1), T.transpose(m1))), [m1]),
        "reshape": (lambda: T.reduce_sum(T.mul(T.reshape(a, (4, 3)), 2.0)), [a]),
        "exp": (lambda: T.reduce_sum(T.exp(T.mul(a, 0.3))), [a]),
        "log": (lambda: T.reduce_sum(T.log(pos)), [pos]),
        "sqrt": (lambda: T.reduce_sum(T.sqrt(pos)), [pos]),
        "sigmoid": (lambda: T.reduce_sum(T.sigmoid(a)), [a]),
        "softplus": (lambda: T.reduce_sum(T.softplus(a)), [a]),
        "relu": (lambda: T.reduce_sum(T.mul(T.relu(a), b)), [a]),
        "leaky_relu": (lambda: T.reduce_sum(T.mul(T.leaky_relu(a), b)), [a]),
        "reduce_sum_axis0": (lambda: T.reduce_sum(T.mul(T.reduce_sum(a, axis=0), T.reduce_sum(a, axis=0))), [a]),
        "reduce_mean_axis1": (lambda: T.reduce_sum(T.mul(T.reduce_mean(a, axis=1), 3.0)), [a]),
        "reduce_mean_all": (lambda: T.reduce_mean(T.mul(a, a)), [a]),
        "concat_rows": (lambda: T.reduce_sum(T.mul(T.concat_rows([a, b]), T.concat_rows([a, b]))), [a, b]),
        "concat_cols": (lambda: T.reduce_sum(T.mul(T.concat_cols([a, col]), T.concat_cols([a, col]))), [a, col]),
        "slice_rows": (lambda: T.reduce_sum(T.mul(T.slice_rows(a, 1, 3), 2.0)), [a]),
        "slice_columns": (lambda: T.reduce_sum(T.mul(T.slice_columns(a, [0, 2, 2]), 1.5)), [a]),
        "softmax_rows": (lambda: T.reduce_sum(T.mul(T.softmax_rows(a, 0.7), b)), [a]),
        "log_softmax_rows": (lambda: T.reduce_sum(T.mul(T.log_softmax_rows(a, 1.3), b)), [a]),
        "l2_normalize_rows": (lambda: T.reduce_sum(T.mul(T.l2_normalize_rows(a), b)), [a]),
        "cosine_similarity_matrix": (
            lambda: T.reduce_sum(T.mul(T.cosine_similarity_matrix(m1, a), 0.5)),
            [m1, a],
        ),
    }
    return cases


@pytest.mark.parametrize("point", range(N_POINTS))
def test_all_ops_match_finite_differences(point):
    rng = np.random.default_rng(100 + point)
    for name, (build, params) in _fd_cases(rng).items():
        try:
            assert_grads_match(build, params)
        except AssertionError as e:
            raise AssertionError(f"op {name}: {e}") from None
