import math
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lyapflow import tensor as T
from lyapflow.errors import ContractError, DimensionError, NonFiniteError
from lyapflow.tensor import Tape, Tensor, backward, finite_diff_gradient

from helpers import rel_err

D = 0.3  # smoothing width used for the relu_smooth instances


# ------------------------------------------------------------------ examples


def test_matmul_identity():
    X = Tensor(np.arange(6.0).reshape(3, 2))
    assert np.array_equal(T.matmul(T.eye(3), X).data, X.data)


def test_softmax_of_zeros_is_uniform():
    assert T.row_softmax(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]


def test_squared_frobenius_norm():
    assert T.squared_frobenius_norm(Tensor([[3.0, 4.0]])).item() == 25.0


def test_dimension_error_names_op_and_shapes():
    with pytest.raises(DimensionError) as info:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_primitive_forward_dispatch():
    a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])
    assert T.primitive_forward("matmul", a, b).item() == 11.0
    assert T.primitive_forward("concat_rows", a, a).shape == (2, 2)
    with pytest.raises(ContractError):
        T.primitive_forward("conv2d", a)


def test_grad_of_inner_product():
    tape = Tape()
    x = tape.watch([[1.0, 2.0]])
    g = backward(tape, T.squared_frobenius_norm(x))
    assert g[x.uid].data.tolist() == [[2.0, 4.0]]


def test_grad_of_sum_of_matrix_vector_product():
    tape = Tape()
    W = tape.watch(np.array([[0.3, -1.0], [2.0, 0.5], [1.0, 1.0]]))
    v = Tensor([[1.0], [1.0]])
    g = backward(tape, T.sum(T.matmul(W, v)))[W.uid].data
    assert np.array_equal(g, np.ones((3, 1)) @ v.data.T)


def test_three_layer_composition_against_finite_differences(rng):
    X = Tensor(rng.uniform(-1, 1, (5, 4)))
    W1, W2, W3 = (rng.uniform(-1, 1, s) for s in [(4, 6), (6, 3), (3, 2)])

    def f(w1, w2, w3):
        h = T.relu_smooth(T.matmul(X, w1), 0.5)
        h = T.row_softmax(T.matmul(h, w2))
        return T.squared_frobenius_norm(T.matmul(h, w3))

    tape = Tape()
    ws = [tape.watch(W) for W in (W1, W2, W3)]
    grads = backward(tape, f(*ws))
    for k, W in enumerate((W1, W2, W3)):
        def fk(w, k=k):
            args = [Tensor(v) for v in (W1, W2, W3)]
            args[k] = w
            return f(*args)
        fd = finite_diff_gradient(fk, Tensor(W), 1e-5)
        assert rel_err(grads[ws[k].uid].data, fd.data) < 1e-4


def test_non_scalar_loss_raises():
    tape = Tape()
    x = tape.watch(np.ones((2, 2)))
    with pytest.raises(ContractError):
        backward(tape, T.scale(x, 2.0))


def test_loss_from_another_tape_raises():
    t1, t2 = Tape(), Tape()
    x = t1.watch([[1.0]])
    t2.watch([[1.0]])
    with pytest.raises(ContractError):
        backward(t2, T.squared_frobenius_norm(x))


def test_unreachable_parameter_gets_zero_gradient():
    tape = Tape()
    x = tape.watch([[1.0, 2.0]])
    unused = tape.watch(np.ones((3, 2)))
    g = backward(tape, T.squared_frobenius_norm(x))
    assert g[unused.uid].shape == (3, 2)
    assert not g[unused.uid].data.any()


def test_mixing_tapes_raises():
    a, b = Tape().watch([[1.0]]), Tape().watch([[1.0]])
    with pytest.raises(ContractError):
        T.add(a, b)


def test_finite_diff_examples():
    g = finite_diff_gradient(T.squared_frobenius_norm, Tensor([[1.0, 0.0]]), 1e-5)
    assert np.allclose(g.data, [[2.0, 0.0]], atol=1e-8)
    g0 = finite_diff_gradient(lambda x: 3.0, Tensor(np.ones((2, 3))), 1e-5)
    assert not g0.data.any()
    with pytest.raises(ContractError):
        finite_diff_gradient(T.squared_frobenius_norm, Tensor([[1.0]]), 0.0)


def test_non_finite_results_are_rejected():
    with pytest.raises(NonFiniteError):
        T.scale(Tensor([[1.0]]), math.inf)
    with pytest.raises(NonFiniteError):
        T.divide(Tensor([[1.0]]), Tensor([[0.0]]))


def test_tensors_are_read_only_and_watch_copies():
    src = np.ones((2, 2))
    t = Tape().watch(src)
    src[0, 0] = 5.0  # the caller's array stays writable and independent
    assert t.data[0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0] = 2.0


def test_large_sums_are_compensated():
    vals = np.array([1e16] + [1.0] * 20_000 + [-1e16])
    assert T.sum(Tensor(vals)).item() == 20_000.0
    ws = T.weighted_sum([Tensor([[v]]) for v in vals], np.ones(vals.size))
    assert ws.item() == 20_000.0


def test_topological_order_of_tape(rng):
    tape = Tape()
    x = tape.watch(rng.normal(size=(3, 3)))
    y = T.row_softmax(T.matmul(x, x))
    T.sum(T.hadamard(y, x))
    seen = set(tape.parameters)
    for node in tape.nodes:
        assert all(uid in seen or uid not in tape._known for uid in node.inputs)
        seen.add(node.output)


# ------------------------------------------------- primitive gradient property


def _away_from_kinks(a, d=D, gap=1e-3):
    for k in (0.0, d):
        near = np.abs(a - k) < gap
        a = np.where(near, k + 2 * gap, a)
    return a


def _instance(op, rng):
    """Inputs plus keyword attributes for one random instance of ``op``."""
    r, c, k = rng.integers(1, 9, size=3)
    u = lambda *s: rng.uniform(-1, 1, size=s)  # noqa: E731
    if op == "matmul":
        return [u(r, k), u(k, c)], {}
    if op in ("add", "subtract", "hadamard"):
        other = [u(r, c), u(1, c), u(r, 1)][rng.integers(3)]
        return [u(r, c), other], {}
    if op == "divide":
        b = rng.uniform(0.5, 1.5, (r, c)) * rng.choice([-1, 1], (r, c))
        return [u(r, c), b], {}
    if op == "scale":
        return [u(r, c)], {"alpha": float(rng.uniform(-2, 2))}
    if op == "row_softmax":
        mask = rng.random((r, c)) < 0.6
        mask[np.arange(r), rng.integers(0, c, r)] = True
        return [u(r, c)], {"mask": mask if rng.random() < 0.5 else None}
    if op in ("relu_smooth", "relu_smooth_grad"):
        return [_away_from_kinks(u(r, c))], {"d": D}
    if op == "sum":
        return [u(r, c)], {"axis": [None, 0, 1][rng.integers(3)]}
    if op == "reshape":
        return [u(r, c)], {"rows": int(c), "cols": int(r)}
    if op == "take_rows":
        return [u(r, c)], {"index": rng.integers(0, r, size=k)}
    if op == "concat_rows":
        return [u(int(rng.integers(1, 5)), c) for _ in range(rng.integers(1, 4))], {}
    if op == "weighted_sum":
        n = int(rng.integers(1, 7))
        return [u(r, c) for _ in range(n)], {"weights": rng.uniform(-1, 1, n)}
    return [u(r, c)], {}


@pytest.mark.parametrize("op", sorted(T.PRIMITIVES))
def test_primitive_gradients_match_finite_differences(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    for _ in range(100):
        arrays_in, attrs = _instance(op, rng)
        probe = T.primitive_forward(op, *[Tensor(a) for a in arrays_in], **attrs)
        R = Tensor(rng.uniform(-1, 1, probe.shape))

        def f(*xs):
            return T.sum(T.hadamard(T.primitive_forward(op, *xs, **attrs), R))

        tape = Tape()
        xs = [tape.watch(a) for a in arrays_in]
        grads = backward(tape, f(*xs))
        for i, a in enumerate(arrays_in):
            def fi(x, i=i):
                args = [Tensor(v) for v in arrays_in]
                args[i] = x
                return f(*args)
            fd = finite_diff_gradient(fi, Tensor(a), 1e-5)
            assert rel_err(grads[xs[i].uid].data, fd.data, floor=1e-6) < 1e-4, (op, i)


finite_matrix = st.integers(1, 8).flatmap(
    lambda r: st.integers(1, 8).flatmap(
        lambda c: arrays(np.float64, (r, c), elements=st.floats(-1, 1))
    )
)


@given(finite_matrix)
def test_softmax_rows_are_distributions(X):
    Y = T.row_softmax(Tensor(X)).data
    assert np.all(np.abs(Y.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all((Y > 0) & (Y < 1)) or X.shape[1] == 1


@given(finite_matrix, st.integers(0, 2**31 - 1))
def test_masked_softmax_rows_are_distributions_on_support(X, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random(X.shape) < 0.5
    mask[:, 0] = True
    Y = T.row_softmax(Tensor(X), mask).data
    assert np.all(np.abs(Y.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(Y[~mask] == 0.0)
    assert np.all(Y[mask] > 0)


def test_replay_is_bit_identical(rng):
    X = rng.uniform(-1, 1, (6, 5))
    W = rng.uniform(-1, 1, (5, 5))
    mask = rng.random((6, 5)) < 0.7
    mask[:, 2] = True

    def run():
        tape = Tape()
        w = tape.watch(W)
        h = T.row_softmax(T.matmul(Tensor(X), w), mask)
        return backward(tape, T.squared_frobenius_norm(T.relu_smooth(h, 0.1)))[w.uid].data

    assert np.array_equal(run(), run())
