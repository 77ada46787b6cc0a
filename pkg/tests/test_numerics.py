import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphmamba import numerics as nx
from graphmamba.errors import DimensionError, NonFiniteError
from graphmamba.numerics import Tape, Tensor

from oracles import central_difference, relative_error


def check_op(op, inputs: dict[str, np.ndarray], seed: int) -> float:
    """Max relative error between tape and finite-difference gradients of sum(op(...) * R)."""
    rng = np.random.default_rng(seed)
    out_shape = op(**{k: Tensor(v) for k, v in inputs.items()}).shape
    weight = rng.normal(size=out_shape)

    def scalar(arrays):
        return float(np.sum(op(**{k: Tensor(v) for k, v in arrays.items()}).data * weight))

    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in inputs.items()}
    with Tape() as tape:
        loss = nx.tsum(nx.mul(op(**leaves), weight))
    grads = tape.gradient(loss, leaves)
    worst = 0.0
    for key in inputs:
        numeric = central_difference(scalar, {k: v.copy() for k, v in inputs.items()}, key)
        worst = max(worst, relative_error(grads[key], numeric))
    return worst


OPS = {
    "matmul": (lambda a, b: nx.matmul(a, b), lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(4, 2))}),
    "dense": (
        lambda x, w, b: nx.dense(x, w, b),
        lambda r: {"x": r.normal(size=(2, 3, 4)), "w": r.normal(size=(4, 5)), "b": r.normal(size=5)},
    ),
    "conv_same": (
        lambda x, k, b: nx.conv2d(x, k, b, "same"),
        lambda r: {"x": r.normal(size=(1, 4, 4, 2)), "k": r.normal(size=(3, 3, 2, 3)), "b": r.normal(size=3)},
    ),
    "conv_valid": (
        lambda x, k, b: nx.conv2d(x, k, b, "valid"),
        lambda r: {"x": r.normal(size=(2, 4, 5, 2)), "k": r.normal(size=(3, 3, 2, 2)), "b": r.normal(size=2)},
    ),
    "conv_1x1": (
        lambda x, k, b: nx.conv2d(x, k, b, "same"),
        lambda r: {"x": r.normal(size=(2, 3, 3, 4)), "k": r.normal(size=(1, 1, 4, 3)), "b": r.normal(size=3)},
    ),
    "sigmoid": (lambda x: nx.sigmoid(x), lambda r: {"x": r.normal(size=(3, 4)) * 3}),
    "tanh": (lambda x: nx.tanh(x), lambda r: {"x": r.normal(size=(3, 4))}),
    # keep relu inputs away from the kink so central differences are valid
    "relu": (lambda x: nx.relu(x), lambda r: {"x": r.choice([-1, 1], size=(3, 4)) * r.uniform(0.1, 2, size=(3, 4))}),
    "softmax": (lambda x: nx.softmax_lastdim(x), lambda r: {"x": r.normal(size=(2, 3, 5))}),
    "log_softmax": (lambda x: nx.log_softmax_lastdim(x), lambda r: {"x": r.normal(size=(4, 3))}),
    "mul_broadcast": (lambda a, b: nx.mul(a, b), lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(3, 1))}),
    "add_broadcast": (lambda a, b: nx.add(a, b), lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(3,))}),
    "sub": (lambda a, b: nx.sub(a, b), lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 3))}),
    "transpose": (lambda a: nx.transpose_last(a), lambda r: {"a": r.normal(size=(2, 3, 4))}),
    "reshape": (lambda a: nx.reshape(a, (6, 2)), lambda r: {"a": r.normal(size=(3, 4))}),
    "concat": (lambda a, b: nx.concat([a, b], axis=1), lambda r: {"a": r.normal(size=(2, 3, 2)), "b": r.normal(size=(2, 1, 2))}),
    "mean": (lambda a: nx.mean(a, axis=(1, 2)), lambda r: {"a": r.normal(size=(2, 3, 4))}),
    "index": (lambda a: a[:, 1, :], lambda r: {"a": r.normal(size=(2, 3, 4))}),
    "gather": (
        lambda a: nx.gather_rows(a, np.array([[2, 0, 2], [1, 3, 0]])),
        lambda r: {"a": r.normal(size=(2, 4, 3))},
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", [0, 1])
def test_op_gradients_match_finite_differences(name, seed):
    op, make = OPS[name]
    assert check_op(op, make(np.random.default_rng(seed)), seed) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_matmul_gradient_random_shapes(seed):
    rng = np.random.default_rng(100 + seed)
    m, k, n = rng.integers(1, 6, size=3)
    inputs = {"a": rng.normal(size=(m, k)), "b": rng.normal(size=(k, n))}
    assert check_op(lambda a, b: nx.matmul(a, b), inputs, seed) < 1e-6


def test_matmul_sum_gradient_4x5_by_5x3():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    with Tape() as tape:
        s = nx.matmul(ta, tb).sum()
    tape.backward(s)

    def f(arrs):
        return float((arrs["a"] @ arrs["b"]).sum())

    assert relative_error(ta.grad, central_difference(f, {"a": a.copy(), "b": b}, "a")) < 1e-6
    assert relative_error(tb.grad, central_difference(f, {"a": a, "b": b.copy()}, "b")) < 1e-6


def test_matmul_identity_and_hand_example():
    m = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_errors_name_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((3, 3, 1))))


def test_conv_identity_and_constant_field():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 5, 3))
    kernel = np.eye(3).reshape(1, 1, 3, 3)
    out = nx.conv2d(Tensor(x), Tensor(kernel), Tensor(np.zeros(3)), "same")
    np.testing.assert_array_equal(out.data, x)

    ones = nx.conv2d(Tensor(np.ones((1, 5, 5, 1))), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)), "valid")
    assert ones.shape == (1, 3, 3, 1)
    np.testing.assert_array_equal(ones.data, 9.0)


def test_conv_same_keeps_extent_and_matches_loop():
    rng = np.random.default_rng(3)
    x, k, b = rng.normal(size=(1, 4, 4, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    out = nx.conv2d(Tensor(x), Tensor(k), Tensor(b), "same").data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 4, 4, 3))
    for i in range(4):
        for j in range(4):
            for o in range(3):
                ref[0, i, j, o] = np.sum(xp[0, i : i + 3, j : j + 3, :] * k[:, :, :, o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        nx.conv2d(Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.zeros((3, 3, 1, 1))), padding="valid")


def test_activation_definitions():
    np.testing.assert_array_equal(nx.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_allclose(nx.softmax_lastdim(Tensor(np.full(4, 3.7))).data, 0.25, rtol=0, atol=1e-15)
    assert nx.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert nx.tanh(Tensor([0.0])).data[0] == 0.0


def test_sigmoid_extreme_inputs_stay_finite():
    out = nx.sigmoid(Tensor([-800.0, 800.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_dense_identity_and_hand_example():
    x = np.random.default_rng(1).normal(size=(2, 3, 4))
    np.testing.assert_array_equal(nx.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    out = nx.dense(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([1.0, 1.0]))
    np.testing.assert_array_equal(out.data, [5.0, 7.0])
    with pytest.raises(DimensionError):
        nx.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 7),
    st.floats(0.1, 30.0),
    st.integers(0, 2**31 - 1),
)
def test_softmax_rows_are_probability_vectors(rows, cols, scale, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * scale
    p = nx.softmax_lastdim(Tensor(x)).data
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_ops_are_deterministic():
    rng = np.random.default_rng(5)
    x, k = rng.normal(size=(2, 6, 6, 3)).astype(np.float32), rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
    a = nx.conv2d(Tensor(x), Tensor(k), padding="same").data
    b = nx.conv2d(Tensor(x), Tensor(k), padding="same").data
    assert a.dtype == np.float32
    assert a.tobytes() == b.tobytes()


def test_non_finite_output_is_an_error():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="mul"):
        nx.mul(Tensor([1e308]), Tensor([1e308]))


def test_tape_replays_in_reverse_order_once():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        b = nx.tanh(a)
        c = nx.sigmoid(b)
        d = nx.tsum(c)
    order = tape.backward(d)
    assert order == [r.op for r in reversed(tape.records)]
    assert order == ["sum", "sigmoid", "tanh"]


def test_shared_input_accumulates_gradient():
    a = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = nx.tsum(a * a + a)
    tape.backward(y)
    np.testing.assert_allclose(a.grad, [7.0])


def test_no_tape_means_no_records():
    a = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        pass
    nx.tanh(a)
    assert len(tape) == 0


def test_flop_counter_counts_multiply_adds():
    with nx.FlopCounter() as fc:
        nx.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((4, 5))))
        nx.dense(Tensor(np.zeros((7, 4))), Tensor(np.zeros((4, 2))))
    assert fc.by_op == {"matmul": 2 * 2 * 3 * 4 * 5, "dense": 2 * 7 * 4 * 2}
