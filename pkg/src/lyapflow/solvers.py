"""Fixed-step integrators for integer- and fractional-order flows.

``solve`` drives a right-hand side ``rhs(state, v_history) -> derivative``
where ``v_history`` is the list of Lyapunov values (1x1 tensors) at the
accepted states before ``state``.  Fields that do not need a history just
ignore it.

The fractional scheme is the Adams-Bashforth-Moulton predictor-corrector
of Diethelm, Ford and Freed for Caputo derivatives, with a single
corrector pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import mpmath
import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NonFiniteError, RangeError, SolverDivergence
from .flows import FlowState, combine
from .tensor import Tensor

SCHEMES = ("euler", "rk4", "frac_abm")


@dataclass(frozen=True)
class SolverConfig:
    beta: float = 1.0
    step_h: float = 1.0
    t_end: float = 10.0
    scheme: str = "euler"
    memory_window: int | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not (0.0 < self.beta <= 1.0):
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if self.scheme != "frac_abm" and self.beta != 1.0:
            raise ConfigError(f"scheme {self.scheme!r} needs beta == 1 (got {self.beta}); use frac_abm")
        if self.step_h <= 0:
            raise ConfigError(f"step_h must be positive, got {self.step_h}")
        if self.t_end < 0:
            raise ConfigError(f"t_end must be non-negative, got {self.t_end}")
        n = self.t_end / self.step_h
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigError(f"t_end / step_h must be an integer, got {n}")
        if self.memory_window is not None and self.memory_window < 1:
            raise ConfigError(f"memory_window must be >= 1 or None, got {self.memory_window}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.step_h))

    @property
    def fractional(self) -> bool:
        return self.scheme == "frac_abm"


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    states: list
    rhs_history: list
    V_tensors: list | None = None
    config: SolverConfig | None = None
    projection_fired: list = field(default_factory=list)

    @property
    def final(self) -> FlowState:
        return self.states[-1]

    @property
    def V_history(self) -> np.ndarray | None:
        if self.V_tensors is None:
            return None
        return np.array([v.item() for v in self.V_tensors])

    def norms(self) -> np.ndarray:
        return np.array([math.sqrt(s.sq_norm()) for s in self.states])

    def __len__(self):
        return len(self.states)


class _Progress:
    """Last accepted step and its norm, for divergence reports."""

    def __init__(self):
        self.step, self.norm = 0, 0.0

    def check(self, state: FlowState, step: int):
        for p in state.parts():
            if not np.all(np.isfinite(p.data)):
                raise SolverDivergence(step, self.norm)
        self.step, self.norm = step, math.sqrt(state.sq_norm())


def solve(rhs: Callable, U0, cfg: SolverConfig, value_fn: Callable | None = None,
          final_rhs: bool = True) -> TrajectoryRecord:
    """Integrate ``rhs`` from ``U0`` over ``[0, cfg.t_end]``.

    ``value_fn(state) -> 1x1 Tensor`` fills ``V_history`` and supplies the
    history argument of ``rhs``.  With ``final_rhs`` off, the derivative at
    the last state is not evaluated and ``rhs_history`` is one shorter.
    """
    state = U0 if isinstance(U0, FlowState) else FlowState(U0)
    step_fn = {"euler": _euler, "rk4": _rk4, "frac_abm": _frac_abm}[cfg.scheme]
    progress = _Progress()
    try:
        return step_fn(rhs, state, cfg, value_fn, final_rhs, progress)
    except NonFiniteError as exc:
        if isinstance(exc, SolverDivergence):
            raise
        raise SolverDivergence(progress.step + 1, progress.norm, str(exc)) from exc


def _value(value_fn, state):
    return None if value_fn is None else value_fn(state)


def _euler(rhs, state, cfg, value_fn, final_rhs, progress):
    h, n = cfg.step_h, cfg.n_steps
    states, fs = [state], []
    V = [] if value_fn else None
    progress.check(state, 0)
    for k in range(n):
        if V is not None:
            V.append(value_fn(state))
        f = rhs(state, V[:-1] if V is not None else None)
        fs.append(f)
        state = combine([state, f], [1.0, h])
        progress.check(state, k + 1)
        states.append(state)
    if V is not None:
        V.append(value_fn(state))
    if final_rhs:
        fs.append(rhs(state, V[:-1] if V is not None else None))
    return _record(cfg, states, fs, V)


def _rk4(rhs, state, cfg, value_fn, final_rhs, progress):
    h, n = cfg.step_h, cfg.n_steps
    states, fs = [state], []
    V = [] if value_fn else None
    hist = lambda: V[:-1] if V is not None else None  # noqa: E731
    progress.check(state, 0)
    for k in range(n):
        if V is not None:
            V.append(value_fn(state))
        k1 = rhs(state, hist())
        k2 = rhs(combine([state, k1], [1.0, h / 2]), hist())
        k3 = rhs(combine([state, k2], [1.0, h / 2]), hist())
        k4 = rhs(combine([state, k3], [1.0, h]), hist())
        fs.append(k1)
        state = combine([state, k1, k2, k3, k4], [1.0, h / 6, h / 3, h / 3, h / 6])
        progress.check(state, k + 1)
        states.append(state)
    if V is not None:
        V.append(value_fn(state))
    if final_rhs:
        fs.append(rhs(state, hist()))
    return _record(cfg, states, fs, V)


def abm_weights(n: int, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Predictor weights b_{j,n+1} and corrector weights a_{j,n+1}, j=0..n."""
    j = np.arange(n + 1, dtype=np.float64)
    b = (n + 1 - j) ** beta - (n - j) ** beta
    a = np.empty(n + 1)
    a[0] = n ** (beta + 1) - (n - beta) * (n + 1) ** beta
    if n >= 1:
        jj = j[1:]
        a[1:] = (n - jj + 2) ** (beta + 1) + (n - jj) ** (beta + 1) - 2 * (n - jj + 1) ** (beta + 1)
    return b, a


def _frac_abm(rhs, state, cfg, value_fn, final_rhs, progress):
    h, n_steps, beta = cfg.step_h, cfg.n_steps, cfg.beta
    c_pred = h ** beta / math.gamma(beta + 1)
    c_corr = h ** beta / math.gamma(beta + 2)
    window = cfg.memory_window
    U0 = state
    states, fs = [state], []
    V = [] if value_fn else None
    progress.check(state, 0)
    if V is not None:
        V.append(value_fn(state))
    fs.append(rhs(state, V[:-1] if V is not None else None))
    for n in range(n_steps):
        b, a = abm_weights(n, beta)
        lo = 0 if window is None else max(0, n + 1 - window)
        hist = fs[lo:]
        pred = combine([U0] + hist, [1.0] + list(c_pred * b[lo:]))
        f_pred = rhs(pred, V if V is not None else None)
        corr = combine([U0, f_pred] + hist, [1.0, c_corr] + list(c_corr * a[lo:]))
        state = corr
        progress.check(state, n + 1)
        states.append(state)
        if V is not None:
            V.append(value_fn(state))
        if n + 1 < n_steps or final_rhs:
            fs.append(rhs(state, V[:-1] if V is not None else None))
    return _record(cfg, states, fs, V)


def _record(cfg, states, fs, V):
    times = np.arange(len(states)) * cfg.step_h
    return TrajectoryRecord(times=times, states=states, rhs_history=fs, V_tensors=V, config=cfg)


# ------------------------------------------------------------------ special functions

# Largest |z|^(1/beta) accepted by mittag_leffler; the series then needs a
# working precision of roughly 0.43 * |z|^(1/beta) extra digits.
ML_RANGE = 4000.0


def mittag_leffler(beta: float, z: float, tol: float = 1e-15) -> float:
    """E_beta(z) = sum_k z^k / Gamma(k beta + 1) for real z.

    The series is summed in multiprecision so that cancellation for
    negative ``z`` does not destroy the result; the working precision grows
    with the size of the largest term.
    """
    if not (0.0 < beta <= 1.0):
        raise ContractError(f"mittag_leffler: beta must lie in (0, 1], got {beta}")
    z = float(z)
    if not math.isfinite(z):
        raise RangeError(f"mittag_leffler: z must be finite, got {z}")
    if z == 0.0:
        return 1.0
    growth = abs(z) ** (1.0 / beta)
    if growth > ML_RANGE:
        raise RangeError(
            f"mittag_leffler: |z|={abs(z):g} outside the supported range for beta={beta} "
            f"(|z|^(1/beta) must not exceed {ML_RANGE:g})")
    # the largest term is about exp(|z|^(1/beta)); keep 20 digits beyond it
    dps = 25 + int(growth / math.log(10)) + 5
    with mpmath.workdps(dps):
        zz = mpmath.mpf(z)
        b = mpmath.mpf(beta)
        total = mpmath.mpf(0)
        k = 0
        threshold = mpmath.mpf(tol) * mpmath.mpf(10) ** -5
        while True:
            term = zz ** k / mpmath.gamma(k * b + 1)
            total += term
            if k > growth + 2 and abs(term) < threshold:
                break
            k += 1
            if k > 100000:
                raise RangeError(f"mittag_leffler: series did not converge for beta={beta}, z={z}")
        return float(total)


def l1_coefficients(n_points: int, beta: float) -> np.ndarray:
    """Weights c_m with D^beta V(t_n) ~ h^{-beta} sum_m c_m V_m (before 1/Gamma(2-beta))."""
    n = n_points - 1
    j = np.arange(n, dtype=np.float64)
    # weight on V_{n-j} - V_{n-j-1}; the j = 0 lower endpoint is 0 even at beta = 1
    w = (j + 1) ** (1 - beta) - np.where(j > 0, j ** (1 - beta), 0.0)
    coef = np.zeros(n + 1)
    coef[n - np.arange(n)] += w
    coef[n - np.arange(n) - 1] -= w
    return coef


def caputo_l1_estimate(V_history, beta: float, step_h: float):
    """L1 estimate of the Caputo derivative of V at the last history point.

    Accepts plain numbers (returns a float) or 1x1 tensors (returns a
    tensor, so gradients flow through the history).
    """
    hist = list(V_history)
    if len(hist) < 2:
        raise ContractError(f"caputo_l1_estimate: need at least 2 history points, got {len(hist)}")
    if not (0.0 < beta <= 1.0) or step_h <= 0:
        raise ContractError(f"caputo_l1_estimate: need beta in (0,1] and step_h > 0, got {beta}, {step_h}")
    scale = step_h ** (-beta) / math.gamma(2 - beta)
    coef = scale * l1_coefficients(len(hist), beta)
    if isinstance(hist[0], Tensor):
        return T.weighted_sum(hist, coef)
    vals = np.array(hist, dtype=np.float64)
    if vals.size > T.COMPENSATED_THRESHOLD:
        return math.fsum((coef * vals).tolist())
    return float(coef @ vals)
