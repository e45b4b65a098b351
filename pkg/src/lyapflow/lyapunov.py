"""Learnable Lyapunov function and the projection that stabilizes a flow.

V is built from an input-convex network g applied to every node row and
summed, G(U) = sum_i g(u_i):

    V(U) = σ(G(U) - G(0)) + ||U||_F^2

with σ the smooth ReLU.  G is convex because the pass-through weights P_i
are nonnegative and σ is convex and nondecreasing, so V is convex,
V(0) = 0 and V(U) >= ||U||_F^2.  Sharing g across nodes keeps V
permutation invariant and defined for any node count (injected nodes
included).

Every quantity here is composed from tape primitives, including the
gradient of V, so the projected vector field can be differentiated with
respect to the network parameters during training.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, InvariantViolation
from .flows import FlowState
from .solvers import caputo_l1_estimate
from .tensor import Tensor

log = logging.getLogger(__name__)

EPS_GRAD = 1e-12


def smooth_relu(x: float, d: float) -> float:
    """0 for x <= 0, x^2/(2d) on (0, d), x - d/2 beyond."""
    if d <= 0:
        raise ContractError(f"smooth_relu: width must be positive, got {d}")
    if x <= 0:
        return 0.0
    if x < d:
        return x * x / (2 * d)
    return x - d / 2


@dataclass(frozen=True)
class ICNNParams:
    """Layer ``i`` computes z_i = q_{i-1} P_i + u W_i + b_i and q_i = σ(z_i).

    ``W[i]`` is d_in x h_i, ``b[i]`` is 1 x h_i, and the pass-through
    weights link layer i-1 to layer i for i >= 1.  They are stored either
    unconstrained (``P_raw``, mapped through σ so they are nonnegative by
    construction) or given directly (``P``, validated on use).  The last
    layer has width 1.
    """

    W: tuple
    b: tuple
    P_raw: tuple | None = None
    P: tuple | None = None
    d: float = 0.1

    def __post_init__(self):
        if self.d <= 0:
            raise ConfigError(f"ICNN smoothing width d must be positive, got {self.d}")
        if len(self.W) != len(self.b) or not self.W:
            raise ConfigError("ICNN needs one bias per input weight and at least one layer")
        if (self.P_raw is None) == (self.P is None) and len(self.W) > 1:
            raise ConfigError("ICNN needs exactly one of P_raw or P for layers beyond the first")
        pass_through = self.P_raw if self.P_raw is not None else self.P
        if pass_through is not None and len(pass_through) != len(self.W) - 1:
            raise ConfigError(f"ICNN with {len(self.W)} layers needs {len(self.W) - 1} pass-through matrices")
        if self.W[-1].cols != 1:
            raise ConfigError(f"ICNN output layer must have width 1, got {self.W[-1].cols}")

    @property
    def n_layers(self) -> int:
        return len(self.W)

    @property
    def d_in(self) -> int:
        return self.W[0].rows

    def pass_through(self) -> tuple:
        if self.P_raw is not None:
            return tuple(T.relu_smooth(p, self.d) for p in self.P_raw)
        P = self.P or ()
        for i, p in enumerate(P):
            if np.any(p.data < 0):
                raise InvariantViolation(f"ICNN pass-through weight P_{i + 1} has negative entries")
        return tuple(P)


def init_icnn(rng: np.random.Generator, d_in: int, hidden=(64,), d: float = 0.1, scale: float = 1.0) -> ICNNParams:
    widths = list(hidden) + [1]
    W, b, P_raw = [], [], []
    prev = None
    for h in widths:
        W.append(Tensor(rng.normal(scale=scale / math.sqrt(d_in), size=(d_in, h))))
        b.append(Tensor(np.zeros((1, h))))
        if prev is not None:
            # raw values centred above the smoothing width so P starts positive
            P_raw.append(Tensor(np.abs(rng.normal(scale=scale / math.sqrt(prev), size=(prev, h))) + d))
        prev = h
    return ICNNParams(tuple(W), tuple(b), tuple(P_raw) if P_raw else None, None, d)


def zero_icnn(d_in: int, hidden=(64,), d: float = 0.1) -> ICNNParams:
    """All-zero weights: g is identically 0 and V(U) = ||U||^2."""
    widths = list(hidden) + [1]
    W = tuple(Tensor(np.zeros((d_in, h))) for h in widths)
    b = tuple(Tensor(np.zeros((1, h))) for h in widths)
    P = tuple(Tensor(np.zeros((widths[i], widths[i + 1]))) for i in range(len(widths) - 1))
    return ICNNParams(W, b, None, P if P else None, d)


def _layers(U: Tensor, params: ICNNParams, P):
    if U.cols != params.d_in:
        raise ContractError(f"ICNN expects {params.d_in} input columns, got {U.cols}")
    Z = []
    q = None
    for i, (W, b) in enumerate(zip(params.W, params.b)):
        z = U @ W + b
        if i > 0:
            z = q @ P[i - 1] + z
        Z.append(z)
        q = T.relu_smooth(z, params.d)
    return Z, q


def icnn_rows(U, params: ICNNParams) -> Tensor:
    """g(u_i) for every row of U, as an N x 1 tensor."""
    U = U if isinstance(U, Tensor) else Tensor(U)
    _, q = _layers(U, params, params.pass_through())
    return q


def icnn_forward(U, params: ICNNParams) -> Tensor:
    """G(U) = sum over rows of g(u_i), as a 1x1 tensor (g itself for one row)."""
    return T.sum(icnn_rows(U, params))


def _icnn_input_grad(Z, params: ICNNParams, P) -> Tensor:
    d = params.d
    delta = T.relu_smooth_grad(Z[-1], d)
    grad = delta @ params.W[-1].T
    for i in range(len(Z) - 2, -1, -1):
        delta = (delta @ P[i].T) * T.relu_smooth_grad(Z[i], d)
        grad = grad + delta @ params.W[i].T
    return grad


@dataclass
class LyapunovTerms:
    value: Tensor      # V(U), 1x1
    grad: Tensor       # dV/dU, same shape as U
    shifted: Tensor    # G(U) - G(0), 1x1


def lyapunov_terms(U: Tensor, params: ICNNParams, with_grad: bool = True) -> LyapunovTerms:
    P = params.pass_through()
    Z, q = _layers(U, params, P)
    origin = Tensor._wrap(np.zeros((1, U.cols)))
    _, q0 = _layers(origin, params, P)
    shifted = T.sum(q) - T.scale(T.sum(q0), float(U.rows))
    value = T.relu_smooth(shifted, params.d) + T.squared_frobenius_norm(U)
    grad = None
    if with_grad:
        outer = T.relu_smooth_grad(shifted, params.d)
        grad = outer * _icnn_input_grad(Z, params, P) + T.scale(U, 2.0)
    return LyapunovTerms(value, grad, shifted)


def lyapunov_value(U, params: ICNNParams) -> Tensor:
    U = U if isinstance(U, Tensor) else Tensor(U)
    return lyapunov_terms(U, params, with_grad=False).value


def lyapunov_grad(U, params: ICNNParams) -> Tensor:
    U = U if isinstance(U, Tensor) else Tensor(U)
    return lyapunov_terms(U, params).grad


# ------------------------------------------------------------ decrease condition


@dataclass(frozen=True)
class LyapunovConfig:
    c: float = 1.0
    alpha3: float = 0.1
    mode: str = "integer"
    d: float = 0.1
    hidden: tuple = (64,)

    def __post_init__(self):
        if self.c <= 0 or self.alpha3 <= 0:
            raise ConfigError(f"c and alpha3 must be positive, got c={self.c}, alpha3={self.alpha3}")
        if self.mode not in ("integer", "fractional"):
            raise ConfigError(f"mode must be 'integer' or 'fractional', got {self.mode!r}")
        if self.d <= 0:
            raise ConfigError(f"smoothing width d must be positive, got {self.d}")


def _phi(U, F, terms, V_history, cfg, beta, step_h):
    if cfg.mode == "integer":
        inner = T.sum(terms.grad * F)
        return inner + T.scale(terms.value, cfg.c)
    if not V_history:
        raise ContractError("fractional phi needs at least one past V value")
    if beta is None or step_h is None:
        raise ContractError("fractional phi needs beta and step_h")
    hist = [v if isinstance(v, Tensor) else Tensor(v) for v in V_history] + [terms.value]
    return caputo_l1_estimate(hist, beta, step_h) + T.scale(T.frobenius_norm(U), cfg.alpha3)


def phi(U, F_value, V_history, cfg: LyapunovConfig, params: ICNNParams, beta=None, step_h=None) -> Tensor:
    """Decrease functional: <∇V, F> + cV, or D^β V + α₃ ||U|| in fractional mode.

    In fractional mode ``V_history`` holds V at the states before ``U``; V(U)
    is appended before taking the L1 estimate.
    """
    terms = lyapunov_terms(U, params)
    return _phi(U, F_value, terms, V_history, cfg, beta, step_h)


@dataclass
class Projection:
    field: Tensor
    fired: bool
    phi: float


def project_detail(F_value, U, V_history, cfg, params, beta=None, step_h=None) -> Projection:
    terms = lyapunov_terms(U, params)
    ph = _phi(U, F_value, terms, V_history, cfg, beta, step_h)
    ph_val = ph.item()
    if ph_val <= 0:
        return Projection(F_value, False, ph_val)
    gsq = T.squared_frobenius_norm(terms.grad)
    if gsq.item() < EPS_GRAD:
        log.warning("projection: |grad V|^2 = %.3g below %.0e, using -cU", gsq.item(), EPS_GRAD)
        return Projection(T.scale(U, -cfg.c), True, ph_val)
    coef = T.divide(ph, gsq)
    return Projection(F_value - terms.grad * coef, True, ph_val)


def project(F_value, U, V_history, cfg: LyapunovConfig, params: ICNNParams, beta=None, step_h=None) -> Tensor:
    """F unchanged when φ <= 0, otherwise F - ∇V φ / ||∇V||^2."""
    return project_detail(F_value, U, V_history, cfg, params, beta, step_h).field


@dataclass
class ProjectedRHS:
    """Wrap a base ``rhs(state, v_history)`` with the stability projection.

    Only the ``U`` component is projected.  In fractional mode the first
    state has no V history and passes through unchanged.
    """

    base: object
    params: ICNNParams
    cfg: LyapunovConfig
    beta: float = 1.0
    step_h: float = 1.0
    fired: list = field(default_factory=list)

    def __call__(self, state: FlowState, v_history=None) -> FlowState:
        F = self.base(state, v_history)
        if self.cfg.mode == "fractional" and not v_history:
            self.fired.append(False)
            return F
        res = project_detail(F.U, state.U, v_history, self.cfg, self.params, self.beta, self.step_h)
        self.fired.append(res.fired)
        if not res.fired:
            return F
        return FlowState(res.field, F.Y)

    def value(self, state: FlowState) -> Tensor:
        return lyapunov_value(state.U, self.params)


def measure_K(states, params: ICNNParams) -> float:
    """Largest V(U)/||U||^2 over the given states (1.0 when all are zero)."""
    ratios = [1.0]
    for s in states:
        U = s.U if isinstance(s, FlowState) else s
        U = U.detach() if isinstance(U, Tensor) else Tensor(U)
        n2 = float(np.sum(U.data ** 2))
        if n2 > 0:
            ratios.append(lyapunov_value(U, params).item() / n2)
    return max(ratios)
