import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lyapflow.errors import ContractError
from lyapflow.flows import (
    AttentionParams, FlowField, FlowState, attention_matrix, grand_rhs, graphbel_operator, graphbel_rhs,
    graphcon_rhs,
)
from lyapflow.graph import Graph
from lyapflow.lyapunov import smooth_relu
from lyapflow.tensor import Tensor

PAIR = Graph.from_edges(2, [(0, 1)])
TRI = Graph.from_edges(3, [(0, 1), (1, 2)])


def _att(WK, WQ, d_k=1.0):
    return AttentionParams(Tensor(WK), Tensor(WQ), d_k)


def _loop_attention(U, WK, WQ, d_k, support):
    """Softmax evaluated cell by cell with scalar arithmetic."""
    n = U.shape[0]
    K, Q = U @ WK, U @ WQ
    out = np.zeros((n, n))
    for i in range(n):
        cols = [j for j in range(n) if support[i][j]]
        s = [sum(K[i, a] * Q[j, a] for a in range(K.shape[1])) / d_k for j in cols]
        m = max(s)
        e = [math.exp(v - m) for v in s]
        for j, v in zip(cols, e):
            out[i, j] = v / sum(e)
    return out


def test_identical_pair_attention():
    U = Tensor([[1.0, 2.0], [1.0, 2.0]])
    p = _att(np.eye(2), np.eye(2))
    with_self = attention_matrix(U, p, PAIR, include_self=True).data
    without = attention_matrix(U, p, PAIR, include_self=False).data
    assert np.allclose(with_self, 0.5)
    assert np.array_equal(without, [[0.0, 1.0], [1.0, 0.0]])


def test_zero_weights_give_uniform_attention(rng):
    U = Tensor(rng.normal(size=(3, 2)))
    A = attention_matrix(U, _att(np.zeros((2, 2)), np.zeros((2, 2))), TRI).data
    assert np.allclose(A[0], [0.5, 0.5, 0])
    assert np.allclose(A[1], [1 / 3] * 3)
    assert np.allclose(A[2], [0, 0.5, 0.5])


def test_three_node_attention_by_hand():
    U = np.array([[0.2, -1.0], [1.5, 0.3], [-0.7, 0.8]])
    WK = np.array([[1.0, 0.5], [-0.3, 2.0]])
    WQ = np.array([[0.4, -1.0], [1.2, 0.1]])
    A = attention_matrix(Tensor(U), _att(WK, WQ, 1.7), TRI).data
    support = TRI.adjacency + np.eye(3) > 0
    assert np.allclose(A, _loop_attention(U, WK, WQ, 1.7, support), atol=1e-10, rtol=0)


def test_isolated_node_attends_to_itself():
    g = Graph.from_edges(3, [(0, 1)])
    A = attention_matrix(Tensor(np.ones((3, 1))), _att(np.eye(1), np.eye(1)), g, include_self=False).data
    assert A[2].tolist() == [0.0, 0.0, 1.0]


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_attention_rows_sum_to_one(seed, include_self):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(2, 9), rng.integers(1, 5)
    edges = [tuple(e) for e in rng.integers(0, n, size=(n, 2))]
    g = Graph.from_edges(int(n), edges)
    U = Tensor(rng.normal(scale=3, size=(n, d)))
    p = _att(rng.normal(size=(d, d)), rng.normal(size=(d, d)), float(rng.uniform(0.5, 2)))
    A = attention_matrix(U, p, g, include_self).data
    assert np.all(np.abs(A.sum(axis=1) - 1) <= 1e-10)
    support = g.support(include_self) | (~g.support(include_self).any(axis=1))[:, None] * np.eye(n, dtype=bool)
    assert not A[~support].any()


# ------------------------------------------------------------------- fields


def _field(kind, d=2, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return FlowField(kind, _att(rng.normal(size=(d, d)), rng.normal(size=(d, d))), **kw)


@pytest.mark.parametrize("kind", ["grand", "graphbel"])
def test_constant_state_is_equilibrium(kind):
    U = Tensor(np.tile([0.3, -1.2], (3, 1)))
    F = _field(kind).rhs(FlowState(U), TRI).U.data
    assert np.allclose(F, 0.0, atol=1e-15)


def test_single_node_grand():
    g = Graph.from_edges(1, [])
    F = grand_rhs(FlowState(Tensor([[2.5, -1.0]])), _field("grand"), g)
    assert not F.U.data.any()


def test_grand_two_node_hand_case():
    U = np.array([[1.0, 0.0], [0.0, 2.0]])
    f = FlowField("grand", _att(np.eye(2), np.eye(2)))
    # scores u_i . u_j: [[1, 0], [0, 4]], softmax per row over both entries
    a = math.exp(1) / (math.exp(1) + 1)
    b = math.exp(4) / (math.exp(4) + 1)
    A = np.array([[a, 1 - a], [1 - b, b]])
    expected = A @ U - U
    assert np.allclose(grand_rhs(FlowState(Tensor(U)), f, PAIR).U.data, expected, atol=1e-14)


def test_graphbel_diagonal_is_row_sum(rng):
    f = _field("graphbel")
    U = Tensor(rng.normal(size=(3, 2)))
    M = graphbel_operator(U, f, TRI).data
    F = graphbel_rhs(FlowState(U), f, TRI).U.data
    assert np.allclose(F, M @ U.data - M.sum(axis=1, keepdims=True) * U.data, atol=1e-14)
    op = M - np.diag(M.sum(axis=1))
    assert np.allclose(op.sum(axis=1), 0, atol=1e-15)


def test_graphbel_three_node_hand_case():
    U = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    f = FlowField("graphbel", _att(np.zeros((2, 2)), np.zeros((2, 2))))
    # zero weights: uniform attention over support; degrees with self are 2, 3, 2
    A = np.array([[1 / 2, 1 / 2, 0], [1 / 3, 1 / 3, 1 / 3], [0, 1 / 2, 1 / 2]])
    deg = np.array([2.0, 3.0, 2.0])
    B = (A > 0) / np.sqrt(np.outer(deg, deg))
    M = A * B
    expected = M @ U - np.diag(M.sum(axis=1)) @ U
    assert np.allclose(graphbel_rhs(FlowState(Tensor(U)), f, TRI).U.data, expected, atol=1e-14)


def test_graphcon_origin_and_ablation(rng):
    zero = Tensor(np.zeros((3, 2)))
    f = _field("graphcon")
    out = graphcon_rhs(FlowState(zero, zero), f, TRI)
    assert not out.U.data.any() and not out.Y.data.any()
    f0 = _field("graphcon", graphcon_gamma=0.0, graphcon_alpha=0.0)
    U, Y = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2)))
    A = attention_matrix(U, f0.attention, TRI).data
    out = graphcon_rhs(FlowState(U, Y), f0, TRI)
    drive = np.vectorize(lambda x: smooth_relu(x, f0.zeta_width))(A @ U.data)
    assert np.allclose(out.U.data, drive, atol=1e-15)
    assert np.array_equal(out.Y.data, U.data)


def test_graphcon_hand_case():
    g = Graph.from_edges(1, [])
    f = FlowField("graphcon", _att(np.eye(1), np.eye(1)), graphcon_gamma=1.0, graphcon_alpha=0.5)
    out = graphcon_rhs(FlowState(Tensor([[2.0]]), Tensor([[1.0]])), f, g)
    # A = [[1]], ζ(2) = 2 - 0.05, so dU = 1.95 - 2 - 0.5
    assert out.U.item() == pytest.approx(-0.55, abs=1e-15)
    assert out.Y.item() == 2.0


def test_graphcon_needs_y():
    with pytest.raises(ContractError):
        graphcon_rhs(FlowState(Tensor([[1.0]])), _field("graphcon", d=1), Graph.from_edges(1, []))


@pytest.mark.parametrize("kind", ["grand", "graphbel", "graphcon"])
def test_rhs_is_pure(kind, rng):
    f = _field(kind)
    U = Tensor(rng.normal(size=(3, 2)))
    s = f.initial_state(U)
    a, b = f.rhs(s, TRI), f.rhs(s, TRI)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.parts(), b.parts()))
    assert (s.Y is not None) == (kind == "graphcon")
