import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from visitflow.tensor import (
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    concat,
    dropout,
    finite_difference_check,
    layer_norm,
    matmul,
    mean,
    mse,
    mul,
    permute,
    relu,
    reshape,
    scale,
    softmax_rows,
    stack,
    take_last,
    tensor_sum,
    tile,
    transpose,
)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_matmul_row_by_column():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
    out = matmul(Tensor(a), Tensor(b)).data
    for i in range(3):
        np.testing.assert_allclose(out[i], naive_matmul(a[i], b), atol=1e-12)


def test_matmul_records_only_with_grad():
    with Tape() as tape:
        matmul(Tensor(np.eye(2)), Tensor(np.eye(2)))
    assert len(tape) == 0
    with Tape() as tape:
        matmul(Parameter(np.eye(2)), Tensor(np.eye(2)))
    assert len(tape) == 1


# --- softmax / relu ---------------------------------------------------------


@pytest.mark.parametrize(
    "row, expected",
    [
        ([0.0, 0.0], [0.5, 0.5]),
        ([1000.0, 1000.0], [0.5, 0.5]),
        ([1.0, 2.0, 3.0], [0.09003057, 0.24472847, 0.66524096]),
    ],
)
def test_softmax_rows_examples(row, expected):
    out = softmax_rows(Tensor([row])).data[0]
    np.testing.assert_allclose(out, expected, atol=5e-9)


@given(arrays(np.float64, (4, 6), elements=st.floats(-500, 500)))
def test_softmax_rows_are_distributions(x):
    out = softmax_rows(Tensor(x)).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_relu_examples():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(Tensor(-np.ones(5))).data, np.zeros(5))
    pos = np.arange(1.0, 6.0)
    np.testing.assert_array_equal(relu(Tensor(pos)).data, pos)


# --- backward -----------------------------------------------------------------


def test_backward_square():
    w = Parameter([1.0, -2.0], "w")
    with Tape() as tape:
        loss = tensor_sum(mul(w, w))
    backward(tape, loss)
    np.testing.assert_array_equal(w.grad, [2.0, -4.0])


def test_unused_parameter_has_zero_gradient():
    w = Parameter([1.0, 2.0], "w")
    unused = Parameter([[3.0]], "unused")
    with Tape() as tape:
        loss = tensor_sum(w)
    tape.backward(loss)
    np.testing.assert_array_equal(unused.grad, [[0.0]])


def test_backward_rejects_non_scalar():
    w = Parameter([1.0, 2.0])
    with Tape() as tape:
        out = scale(w, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(out)


def test_gradients_accumulate_across_uses():
    w = Parameter([3.0])
    with Tape() as tape:
        loss = tensor_sum(add(w, mul(w, w)))
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, [7.0])


def _composite_loss(rng):
    a = Parameter(rng.normal(size=(3, 4)), "a")
    b = Parameter(rng.normal(size=(4, 5)), "b")
    c = Parameter(rng.normal(size=5), "c")
    x = Tensor(rng.normal(size=(2, 3, 3)))

    def f():
        h = add_bias(matmul(x, a), Parameter(np.zeros(4)))
        h = relu(matmul(softmax_rows(h), b))
        return mean(add_bias(h, c))

    return f, [a, b, c]


def test_backward_is_bitwise_deterministic():
    grads = []
    for _ in range(2):
        f, params = _composite_loss(np.random.default_rng(5))
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        grads.append([p.grad.copy() for p in params])
    for g1, g2 in zip(*grads):
        assert np.array_equal(g1, g2)


def test_gradient_accumulation_is_linear():
    rng = np.random.default_rng(9)
    w = Parameter(rng.normal(size=(3, 3)), "w")
    x = Tensor(rng.normal(size=(4, 3)))

    def f():
        return tensor_sum(relu(matmul(x, w)))

    def g():
        return mean(softmax_rows(matmul(x, w)))

    def grad_of(*fns):
        w.zero_grad()
        for fn in fns:
            with Tape() as tape:
                loss = fn()
            tape.backward(loss)
        return w.grad.copy()

    with Tape() as tape:
        both = add(f(), g())
    w.zero_grad()
    tape.backward(both)
    joint = w.grad.copy()
    np.testing.assert_allclose(grad_of(f, g), grad_of(f) + grad_of(g), atol=1e-12)
    np.testing.assert_allclose(joint, grad_of(f) + grad_of(g), atol=1e-12)


def test_tapes_are_thread_local():
    import threading

    w = Parameter([1.0])
    seen = []
    with Tape() as tape:

        def worker():
            scale(w, 2.0)
            seen.append(True)

        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen and len(tape) == 0


# --- finite differences -------------------------------------------------------


def test_fd_check_polynomial():
    w = Parameter([3.0])
    assert finite_difference_check(lambda: tensor_sum(mul(w, w)), w, 1e-5) < 1e-8


def test_fd_check_relu_linear_region():
    w = Parameter([1.0])
    assert finite_difference_check(lambda: tensor_sum(relu(w)), w, 1e-5) < 1e-6


def test_fd_check_softmax_cross_product():
    f, params = _composite_loss(np.random.default_rng(3))
    assert finite_difference_check(f, params) < 1e-4


def test_fd_check_rejects_bad_eps():
    w = Parameter([1.0])
    with pytest.raises(ValueError):
        finite_difference_check(lambda: tensor_sum(w), w, 0.0)


def test_fd_check_non_finite_raises():
    w = Parameter([1.0])
    with pytest.raises(FloatingPointError):
        finite_difference_check(lambda: tensor_sum(mul(w, Tensor([np.inf]))), w)


@pytest.mark.parametrize(
    "build",
    [
        lambda x: tensor_sum(mul(transpose(x), transpose(x))),
        lambda x: tensor_sum(mul(reshape(x, (2, 6)), reshape(x, (2, 6)))),
        lambda x: mean(mul(permute(x, (1, 0, 2)), permute(x, (1, 0, 2)))),
        lambda x: tensor_sum(relu(tile(x, 3))),
        lambda x: tensor_sum(mul(take_last(x, 1, 3), take_last(x, 1, 3))),
        lambda x: mean(mul(concat([x, x], axis=-1), concat([x, x], axis=-1))),
        lambda x: mean(mul(stack([x, x], axis=1), stack([x, x], axis=1))),
        lambda x: mse(x, np.ones((2, 2, 3))),
        lambda x: tensor_sum(mul(softmax_rows(x), softmax_rows(x))),
    ],
)
def test_primitive_gradients(build):
    rng = np.random.default_rng(11)
    x = Parameter(rng.normal(size=(2, 2, 3)) + 0.1, "x")
    assert finite_difference_check(lambda: build(x), x) < 1e-6


def test_layer_norm_gradients():
    rng = np.random.default_rng(12)
    x = Parameter(rng.normal(size=(3, 5)), "x")
    gain = Parameter(rng.normal(size=5), "gain")
    shift = Parameter(rng.normal(size=5), "shift")
    target = rng.normal(size=(3, 5))
    assert finite_difference_check(lambda: mse(layer_norm(x, gain, shift), target), [x, gain, shift]) < 1e-6


def test_dropout_off_is_identity_and_on_is_inverted():
    x = Tensor(np.ones((200, 50)))
    assert dropout(x, 0.5, None, training=False) is x
    out = dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05


def test_mul_rejects_broadcasting():
    with pytest.raises(ShapeError):
        mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_item_requires_single_element():
    assert Tensor([[2.5]]).item() == 2.5
    with pytest.raises(ValueError):
        Tensor([1.0, 2.0]).item()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_gradient_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = Parameter(rng.normal(size=(m, k)), "a")
    b = Parameter(rng.normal(size=(k, n)), "b")
    target = rng.normal(size=(m, n))
    assert finite_difference_check(lambda: mse(matmul(a, b), target), [a, b]) < 1e-4
