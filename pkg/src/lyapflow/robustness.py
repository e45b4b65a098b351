"""Evasion attacks, multi-seed robustness evaluation and the envelope certifier.

Attacks are white-box against the artifact's own model.  Feature PGD moves
test-node features inside an L∞ ball; injection attacks append unlabeled
nodes wired to the test region and optimize only their features.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, LyapflowError
from .graph import Dataset, InjectionBudget, degree_filter_eval_set, inject_nodes
from .lyapunov import LyapunovConfig, measure_K
from .model import Model, forward, icnn_params, init_model, input_gradient, predict
from .solvers import TrajectoryRecord, mittag_leffler
from .training import TrainConfig, perturb_features, train

log = logging.getLogger(__name__)

ATTACK_KINDS = ("pgd_features", "pgd_inject", "random_inject")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd_features"
    eps: float = 0.1
    steps: int = 20
    step_size: float | None = None
    budget: InjectionBudget | None = None
    n_inject: int | None = None
    target: str = "evasion"

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if self.eps < 0 or self.steps < 0:
            raise ConfigError(f"attack eps and steps must be >= 0 (got {self.eps}, {self.steps})")
        if self.target != "evasion":
            raise ConfigError(f"only evasion attacks are supported, got target {self.target!r}")
        if self.kind != "pgd_features" and self.budget is None:
            raise ConfigError(f"{self.kind} needs an injection budget")

    @property
    def name(self) -> str:
        if self.kind == "pgd_features":
            return f"pgd_features(eps={self.eps:g},steps={self.steps})"
        return f"{self.kind}(nodes={self.inject_count},edges={self.budget.max_edges_per_node},steps={self.steps})"

    @property
    def inject_count(self) -> int:
        if self.n_inject is not None:
            return self.n_inject
        return self.budget.max_nodes if self.budget is not None else 0

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.eps if self.steps <= 1 else 2.5 * self.eps / self.steps

    def to_dict(self) -> dict:
        return asdict(self)


def pgd_feature_attack(ds: Dataset, model: Model, cfg: AttackConfig, rng=None, eval_idx=None,
                       stabilized=None) -> Dataset:
    """Sign-gradient ascent on the test-node features, projected to the L∞ ball."""
    idx = ds.test if eval_idx is None else np.asarray(eval_idx)
    if cfg.eps == 0 or cfg.steps == 0:
        return ds
    X = np.array(ds.features)
    Xp = perturb_features(model, ds, X, idx, cfg.eps, cfg.steps, cfg.alpha, stabilized)
    return ds.with_features(Xp)


def _wire_injection(ds: Dataset, m: int, k: int, targets: np.ndarray, rng) -> list:
    k = min(k, targets.size)
    edges = []
    for r in range(m):
        node = ds.n_nodes + r
        for t in rng.choice(targets, size=k, replace=False):
            edges.append((int(t), node))
    return edges


def _inject(ds: Dataset, model: Model, cfg: AttackConfig, rng, eval_idx, stabilized, optimize: bool) -> Dataset:
    m = cfg.inject_count
    if m == 0:
        return ds
    rng = rng if rng is not None else np.random.default_rng(0)
    targets = np.asarray(ds.test if eval_idx is None else eval_idx, dtype=np.int64)
    lo, hi = ds.features.min(axis=0), ds.features.max(axis=0)
    feats = lo + (hi - lo) * rng.random((m, ds.n_features))
    edges = _wire_injection(ds, m, cfg.budget.max_edges_per_node, targets, rng)
    attacked = inject_nodes(ds, feats, edges, cfg.budget)
    if not optimize or cfg.steps == 0:
        return attacked
    new = np.arange(ds.n_nodes, attacked.n_nodes)
    X = np.array(attacked.features)
    alpha = cfg.step_size if cfg.step_size is not None else 0.1 * (hi - lo)
    for _ in range(cfg.steps):
        g = input_gradient(model, attacked, X, targets, stabilized)
        X[new] = np.clip(X[new] + alpha * np.sign(g[new]), lo, hi)
    return attacked.with_features(X)


def pgd_inject_attack(ds, model, cfg: AttackConfig, rng=None, eval_idx=None, stabilized=None) -> Dataset:
    """Inject random nodes into the test region, then PGD on their features."""
    return _inject(ds, model, cfg, rng, eval_idx, stabilized, optimize=True)


def random_inject_attack(ds, model, cfg: AttackConfig, rng=None, eval_idx=None, stabilized=None) -> Dataset:
    return _inject(ds, model, cfg, rng, eval_idx, stabilized, optimize=False)


ATTACKS = {
    "pgd_features": pgd_feature_attack,
    "pgd_inject": pgd_inject_attack,
    "random_inject": random_inject_attack,
}


def run_attack(ds, model, cfg: AttackConfig, rng=None, eval_idx=None, stabilized=None) -> Dataset:
    return ATTACKS[cfg.kind](ds, model, cfg, rng, eval_idx, stabilized)


# ------------------------------------------------------------------ certifier


@dataclass
class Certification:
    mode: str
    pass_fraction: float
    worst_margin: float
    margins: np.ndarray
    envelope: np.ndarray
    observed: np.ndarray
    times: np.ndarray
    alpha2: float | None = None

    @property
    def passed(self) -> bool:
        return self.pass_fraction == 1.0

    def summary(self) -> dict:
        return {"mode": self.mode, "pass_fraction": self.pass_fraction, "worst_margin": self.worst_margin,
                "steps": int(self.margins.size), "alpha2": self.alpha2}


def certify_trajectory(record: TrajectoryRecord, cfg: LyapunovConfig, beta: float, measured_alpha2: float | None = None,
                       tol: float | None = None, mode: str | None = None) -> Certification:
    """Check the decay envelope at every stored step.

    Exponential mode compares V(t_k) with V(0) e^{-c t_k}; Mittag-Leffler
    mode compares ||U(t_k)||^2 with V(0) E_β(-(α₃/α₂) t_k^β), using the
    exact lower bound α₁ = 1.  A step passes when the observed value does
    not exceed the envelope times (1 + tol).  Margins are
    ``(envelope (1 + tol) - observed) / V(0)``.
    """
    if record.V_tensors is None:
        raise ContractError("certify_trajectory: trajectory has no V history")
    V = record.V_history
    t = np.asarray(record.times, dtype=np.float64)
    mode = mode or ("exponential" if cfg.mode == "integer" else "mittag_leffler")
    V0 = float(V[0])
    if mode == "exponential":
        tol = 0.05 if tol is None else tol
        observed = V
        envelope = V0 * np.exp(-cfg.c * t)
    elif mode == "mittag_leffler":
        tol = 0.10 if tol is None else tol
        if measured_alpha2 is None or measured_alpha2 <= 0:
            raise ContractError("Mittag-Leffler certification needs a positive measured alpha2")
        observed = np.array([s.sq_norm() for s in record.states])
        rate = cfg.alpha3 / measured_alpha2
        envelope = np.array([V0 * mittag_leffler(beta, -rate * tk ** beta) for tk in t])
    else:
        raise ConfigError(f"unknown certification mode {mode!r}")
    bound = envelope * (1.0 + tol)
    ok = observed <= bound
    margins = (bound - observed) / V0 if V0 > 0 else bound - observed
    return Certification(mode, float(np.mean(ok)), float(margins.min()), margins, envelope, observed, t,
                         measured_alpha2)


def certify_model(model: Model, ds: Dataset, beta: float | None = None, tol: float | None = None) -> Certification:
    """Solve the projected dynamics of a stabilized model and certify them."""
    if not model.stabilizable or model.stage < 2:
        raise ContractError("certification needs a stabilized (stage-2) model")
    res = forward(model, ds, stabilized=True, record_V=True)
    cfg = model.config.lyapunov
    beta = model.config.solver.beta if beta is None else beta
    K = measure_K(res.record.states, icnn_params(model)) if cfg.mode == "fractional" else None
    return certify_trajectory(res.record, cfg, beta, K, tol)


# ------------------------------------------------------------------ evaluation


@dataclass
class RobustReport:
    clean: dict
    robust: dict
    attacks: list
    seeds: list
    eval_size: int
    certification: dict | None = None
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [("clean", self.clean)] + list(self.robust.items())
        width = max(len(r[0]) for r in rows)
        lines = [f"{'setting':<{width}}  accuracy (%)"]
        for name, stat in rows:
            if stat["mean"] is None:
                lines.append(f"{name:<{width}}  n/a")
            else:
                lines.append(f"{name:<{width}}  {100 * stat['mean']:.2f} ± {100 * stat['std']:.2f}")
        return "\n".join(lines)


def _stat(values) -> dict:
    vals = [float(v) for v in values]
    if not vals:
        return {"mean": None, "std": None, "per_seed": []}
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "per_seed": vals}


def _seed_run(args):
    ds, model, attacks, seed, eval_idx, train_cfg, stabilized = args
    out = {"seed": seed, "clean": None, "robust": {}, "error": None}
    try:
        if train_cfg is not None:
            fresh = init_model(model.config, model.n_features, model.n_classes, np.random.default_rng(seed))
            r1, r2 = train(ds, fresh, _with_seed(train_cfg, seed), stabilize=stabilized)
            model = (r2 or r1).model
        stab = model.stabilizable and model.stage >= 2 if stabilized is None else stabilized
        out["clean"] = predict(forward(model, ds, stabilized=stab, record_V=False).logits, ds.labels, eval_idx)
        for i, cfg in enumerate(attacks):
            rng = np.random.default_rng([seed, i])
            attacked = run_attack(ds, model, cfg, rng, eval_idx, stab)
            logits = forward(model, attacked, stabilized=stab, record_V=False).logits
            out["robust"][cfg.name] = predict(logits, attacked.labels, eval_idx)
    except LyapflowError as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)


def evaluate(ds: Dataset, model: Model, attacks, seeds, low_q: float = 0.05, high_q: float = 0.05,
             train_cfg: TrainConfig | None = None, stabilized: bool | None = None, jobs: int = 1,
             certify: bool = False) -> RobustReport:
    """Clean and attacked accuracy on the degree-filtered test set, per seed.

    With ``train_cfg`` a fresh model is initialised and trained for every
    seed; otherwise the given model is attacked as is and seeds only drive
    the attack randomness.  Failed runs are listed in ``failures``.
    """
    seeds = list(seeds)
    if not seeds:
        raise ContractError("evaluate needs at least one seed")
    attacks = list(attacks)
    eval_idx = degree_filter_eval_set(ds, low_q, high_q)
    jobs_args = [(ds, model, attacks, s, eval_idx, train_cfg, stabilized) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_seed_run, jobs_args))
    else:
        results = [_seed_run(a) for a in jobs_args]
    ok = [r for r in results if r["error"] is None]
    failures = [{"seed": r["seed"], "error": r["error"]} for r in results if r["error"] is not None]
    robust = {cfg.name: _stat([r["robust"][cfg.name] for r in ok]) for cfg in attacks}
    cert = None
    if certify and train_cfg is None and model.stabilizable and model.stage >= 2:
        cert = certify_model(model, ds).summary()
    return RobustReport(
        clean=_stat([r["clean"] for r in ok]), robust=robust, attacks=[a.to_dict() for a in attacks],
        seeds=seeds, eval_size=int(eval_idx.size), certification=cert, failures=failures,
    )
