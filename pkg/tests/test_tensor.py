import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rhythmlab import tensor as T
from rhythmlab.tensor import ContractError, DimensionError, NumericError, Tensor


def brute_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][r] * b[r][j] for r in range(k)) for j in range(n)] for i in range(m)]


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)


def test_matmul_one_by_one():
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_against_dot_products():
    a, b = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
    expected = brute_matmul(a, b)
    assert expected == [[19, 22], [43, 50]]
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, expected)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_softmax_values():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    e = math.e
    expected = [e / (e + e * e), e * e / (e + e * e)]
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0])).data, expected, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0])).data, [0.26894, 0.73106], atol=1e-5)


@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_softmax_rows_and_shift(x, c):
    y = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(y > 0) or np.all(y >= 0)
    np.testing.assert_allclose(T.softmax(Tensor(x + c), axis=-1).data, y, atol=1e-12)


def test_softmax_bad_axis():
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.ones((2, 2))), axis=3)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_loss_gives_zero_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum(Tensor([3.0, 4.0]))
    T.backward(loss, [x])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_accumulates_over_two_references():
    x = Tensor([3.0, -1.5], requires_grad=True)
    a, b = x, x  # two consumers of one node
    T.backward(T.sum(T.mul(a, b)))
    np.testing.assert_array_equal(x.grad, [6.0, -3.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, x))


def test_tape_topological_and_visits_once():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = T.tanh(T.matmul(x, x))
    loss = T.sum(T.add(y, y))
    tape = T.Tape.record(loss)
    position = {node_id: i for i, (_, node_id, _) in enumerate(tape.ops())}
    for _, node_id, inputs in tape.ops():
        for parent in inputs:
            assert position[parent] < position[node_id]
    ids = [node_id for _, node_id, _ in tape.ops()]
    assert len(ids) == len(set(ids))


def _mlp_loss(params, x, y):
    w1, b1, w2, b2 = params
    h = T.tanh(T.add(T.matmul(x, w1), b1))
    return T.squared_error(T.add(T.matmul(h, w2), b2), y)


def test_two_layer_mlp_matches_finite_differences(rng):
    params = [
        Tensor(rng.standard_normal((3, 5)), requires_grad=True),
        Tensor(rng.standard_normal(5), requires_grad=True),
        Tensor(rng.standard_normal((5, 2)), requires_grad=True),
        Tensor(rng.standard_normal(2), requires_grad=True),
    ]
    x, y = Tensor(rng.standard_normal((4, 3))), rng.standard_normal((4, 2))
    assert T.grad_check(lambda: _mlp_loss(params, x, y), params, eps=1e-5) < 1e-4


def test_grad_check_linear_is_exact(rng):
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    x = Tensor(rng.standard_normal((4, 3)))
    # central differences are exact for a linear f; a wide step keeps round-off out
    assert T.grad_check(lambda: T.sum(T.matmul(x, w)), [w], eps=1e-2) <= 1e-9


def test_grad_check_flags_doubled_gradient(rng):
    def buggy_square(a):
        return T.apply_op("buggy", a.data**2, (a,), lambda g: (2 * (2 * a.data) * g,))

    w = Tensor(rng.uniform(0.5, 2.0, size=4), requires_grad=True)
    err = T.grad_check(lambda: T.sum(buggy_square(w)), [w])
    assert err == pytest.approx(0.5, abs=1e-6)


def test_grad_check_rejects_nondeterministic_f(rng):
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        T.grad_check(lambda: T.sum(T.mul(w, rng.standard_normal(2))), [w])


# every primitive against central differences, through a random linear read-out

PRIMITIVES = {
    "matmul": lambda a, b: T.matmul(a, b),
    "add": lambda a, b: T.add(a, T.transpose(b)),
    "mul": lambda a, b: T.mul(a, T.transpose(b)),
    "scale": lambda a, b: T.scale(a, -1.7),
    "sum": lambda a, b: T.sum(a, axis=0, keepdims=True),
    "mean": lambda a, b: T.mean(a, axis=1),
    "transpose": lambda a, b: T.transpose(a),
    "reshape": lambda a, b: T.reshape(a, (2, 6)),
    "concat": lambda a, b: T.concat([a, T.transpose(b)], axis=0),
    "slice": lambda a, b: a[1:, ::2],
    "tanh": lambda a, b: T.tanh(a),
    "sigmoid": lambda a, b: T.sigmoid(a),
    "gelu": lambda a, b: T.gelu(a),
    "softmax": lambda a, b: T.softmax(a, axis=-1),
    "layer_norm": lambda a, b: T.layer_norm(a, T.sum(b, axis=1), T.mean(b, axis=1)),
    "squared_error": lambda a, b: T.squared_error(a, T.transpose(b)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_vjp_matches_finite_differences(name, rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    op = PRIMITIVES[name]
    probe = rng.standard_normal(op(a, b).shape)
    f = lambda: T.sum(T.mul(op(a, b), probe))  # noqa: E731
    assert T.grad_check(f, [a, b]) < 1e-4


def test_embedding_gradient_scatters(rng):
    table = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    ids = np.array([[0, 2], [2, 4]])
    probe = rng.standard_normal((2, 2, 3))
    f = lambda: T.sum(T.mul(T.embedding(table, ids), probe))  # noqa: E731
    assert T.grad_check(f, [table]) < 1e-6
    T.backward(f())
    np.testing.assert_array_equal(table.grad[1], 0.0)


def test_broadcast_add_unbroadcasts(rng):
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    T.backward(T.sum(T.add(a, b)))
    np.testing.assert_array_equal(b.grad, np.full(4, 6.0))


@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)))
def test_primitives_do_not_mutate_inputs(x):
    a = Tensor(x.copy(), requires_grad=True)
    before = a.data.copy()
    out = T.sum(T.layer_norm(T.gelu(T.softmax(a)), Tensor(np.ones(3)), Tensor(np.zeros(3))))
    T.backward(out)
    np.testing.assert_array_equal(a.data, before)
    assert not a.data.flags.writeable


def test_nonfinite_is_an_error():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        T.mul(Tensor([1e308]), Tensor([1e308]))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad
