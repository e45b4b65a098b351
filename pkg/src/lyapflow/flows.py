"""Base vector fields for the graph flows: GRAND, GraphBel and GraphCON.

Each field maps a :class:`FlowState` to its time derivative.  Attention is
recomputed from the current features on every call, so the fields are
autonomous in ``t``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .graph import Graph
from .tensor import Tensor

log = logging.getLogger(__name__)

FLOW_KINDS = ("grand", "graphbel", "graphcon")


@dataclass(frozen=True)
class FlowState:
    """Features ``U`` plus the auxiliary ``Y`` carried by GraphCON."""

    U: Tensor
    Y: Tensor | None = None

    def parts(self) -> tuple[Tensor, ...]:
        return (self.U,) if self.Y is None else (self.U, self.Y)

    @classmethod
    def from_parts(cls, parts) -> "FlowState":
        return cls(parts[0], parts[1] if len(parts) > 1 else None)

    def detach(self) -> "FlowState":
        return FlowState.from_parts([p.detach() for p in self.parts()])

    def sq_norm(self) -> float:
        """Squared Frobenius norm of ``U`` (``Y`` excluded)."""
        return float(np.sum(self.U.data ** 2))


def combine(states, weights) -> FlowState:
    """Linear combination of states, component by component."""
    states = list(states)
    n_parts = len(states[0].parts())
    out = []
    for k in range(n_parts):
        comps = [s.parts()[k] for s in states]
        out.append(T.weighted_sum(comps, weights))
    return FlowState.from_parts(out)


@dataclass(frozen=True)
class AttentionParams:
    WK: Tensor
    WQ: Tensor
    d_k: float = 1.0

    def __post_init__(self):
        if self.d_k <= 0:
            raise ConfigError(f"attention scale d_k must be positive, got {self.d_k}")
        if self.WK.shape != self.WQ.shape:
            raise ConfigError(f"WK {self.WK.shape} and WQ {self.WQ.shape} must match")


@dataclass(frozen=True)
class FlowField:
    kind: str
    attention: AttentionParams
    graphcon_gamma: float = 1.0
    graphcon_alpha: float = 1.0
    graphbel_norm: str = "sym"
    include_self: bool = True
    zeta_width: float = 0.1

    def __post_init__(self):
        if self.kind not in FLOW_KINDS:
            raise ConfigError(f"flow kind must be one of {FLOW_KINDS}, got {self.kind!r}")
        if self.graphbel_norm not in ("sym", "none"):
            raise ConfigError(f"graphbel_norm must be 'sym' or 'none', got {self.graphbel_norm!r}")

    def initial_state(self, U0: Tensor) -> FlowState:
        if self.kind == "graphcon":
            return FlowState(U0, T.scale(U0, 0.0))
        return FlowState(U0)

    def rhs(self, state: FlowState, graph: Graph) -> FlowState:
        return _RHS[self.kind](state, self, graph)


def _support(graph, include_self: bool) -> np.ndarray:
    if isinstance(graph, Graph):
        mask = graph.support(include_self)
    else:
        mask = np.asarray(graph) != 0
        if include_self:
            mask = mask | np.eye(mask.shape[0], dtype=bool)
    empty = ~mask.any(axis=1)
    if empty.any():
        log.info("attention: %d node(s) with empty support fall back to self-weight 1", int(empty.sum()))
        mask = mask.copy()
        idx = np.flatnonzero(empty)
        mask[idx, idx] = True
    return mask


def attention_matrix(U: Tensor, params: AttentionParams, graph, include_self: bool = True) -> Tensor:
    """Row-stochastic attention over each node's support.

    Entry (i, j) is the softmax over the support of row i of
    ``(u_i W^K) . (u_j W^Q) / d_k``; entries outside the support are zero.
    """
    mask = _support(graph, include_self)
    if mask.shape[0] != U.rows:
        raise ContractError(f"attention: graph has {mask.shape[0]} nodes but U has {U.rows} rows")
    keys = U @ params.WK
    queries = U @ params.WQ
    scores = T.scale(keys @ queries.T, 1.0 / params.d_k)
    return T.row_softmax(scores, mask)


def grand_rhs(state: FlowState, field: FlowField, graph) -> FlowState:
    """(A(U) - I) U."""
    U = state.U
    A = attention_matrix(U, field.attention, graph, field.include_self)
    return FlowState(A @ U - U)


def graphbel_operator(U: Tensor, field: FlowField, graph) -> Tensor:
    """A_s ⊙ B_s, the off-diagonal part of the GraphBel operator."""
    A = attention_matrix(U, field.attention, graph, field.include_self)
    if field.graphbel_norm == "none":
        return A
    if isinstance(graph, Graph):
        B = graph.symmetric_normalizer
    else:
        M = _support(graph, True).astype(np.float64)
        inv = 1.0 / np.sqrt(M.sum(axis=1))
        B = inv[:, None] * M * inv[None, :]
    return A * Tensor._wrap(B)


def graphbel_rhs(state: FlowState, field: FlowField, graph) -> FlowState:
    """(A_s ⊙ B_s - Ψ) U, with Ψ the diagonal of row sums."""
    U = state.U
    M = graphbel_operator(U, field, graph)
    psi = T.sum(M, axis=1)
    return FlowState(M @ U - psi * U)


def graphcon_rhs(state: FlowState, field: FlowField, graph) -> FlowState:
    """dU = ζ(A(U) U) - γU - αY,  dY = U."""
    if state.Y is None:
        raise ContractError("graphcon_rhs: state is missing the auxiliary Y")
    U, Y = state.U, state.Y
    A = attention_matrix(U, field.attention, graph, field.include_self)
    drive = T.relu_smooth(A @ U, field.zeta_width)
    dU = drive - T.scale(U, field.graphcon_gamma) - T.scale(Y, field.graphcon_alpha)
    return FlowState(dU, T.scale(U, 1.0))


_RHS = {"grand": grand_rhs, "graphbel": graphbel_rhs, "graphcon": graphcon_rhs}
