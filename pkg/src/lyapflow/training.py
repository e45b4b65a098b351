"""Two-stage training with convergence detection and optional adversarial training.

Stage 1 fits the base flow (encoder, attention, classifier) without the
Lyapunov module.  Stage 2 switches the projection on and updates only the
ICNN and the classifier; the encoder and flow parameters stay bit-identical.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, NonFiniteError, SolverDivergence, TrainingDivergence
from .graph import Dataset
from .model import BASE_GROUPS, STAGE2_GROUPS, Model, forward, input_gradient, loss, predict
from .tensor import Tape, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdversarialConfig:
    eps: float = 0.1
    pgd_steps: int = 5
    step_size: float | None = None

    def __post_init__(self):
        if self.eps < 0 or self.pgd_steps < 0:
            raise ConfigError(f"adversarial eps and pgd_steps must be >= 0 (got {self.eps}, {self.pgd_steps})")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.eps / max(self.pgd_steps, 1) * 2.5 if self.pgd_steps > 1 else self.eps


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 200
    stage2_epochs: int = 100
    lr_stage1: float = 1e-2
    lr_stage2: float = 1e-3
    optimizer: str = "momentum"
    momentum: float = 0.9
    window: int = 10
    eps_acc: float = 0.005
    min_epochs: int = 20
    seed: int = 0
    adversarial: AdversarialConfig | None = None

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError(f"convergence window must be >= 2, got {self.window}")
        if self.eps_acc <= 0:
            raise ConfigError(f"eps_acc must be positive, got {self.eps_acc}")
        if self.optimizer not in ("momentum", "adam"):
            raise ConfigError(f"optimizer must be 'momentum' or 'adam', got {self.optimizer!r}")
        if self.lr_stage1 < 0 or self.lr_stage2 < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.min_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")


def detect_convergence(history, w: int, eps_acc: float) -> bool:
    """True when the last ``w`` accuracies vary by at most ``eps_acc``."""
    if len(history) == 0:
        raise ContractError("detect_convergence: empty history")
    if len(history) < w:
        return False
    tail = history[-w:]
    return max(tail) - min(tail) <= eps_acc


class Momentum:
    def __init__(self, lr, mu=0.9):
        self.lr, self.mu = lr, mu
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.mu * v + g
            self.velocity[name] = v
            params[name] = params[name] - self.lr * v


class Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        for name, g in grads.items():
            m = self.b1 * self.m.get(name, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(name, 0.0) + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            params[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg: TrainConfig, lr: float):
    return Momentum(lr, cfg.momentum) if cfg.optimizer == "momentum" else Adam(lr)


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)
    converged: bool = False

    @property
    def train_acc(self) -> list:
        return [r["train_acc"] for r in self.history]

    @property
    def val_acc(self) -> list:
        return [r["val_acc"] for r in self.history]


def perturb_features(model: Model, ds: Dataset, X: np.ndarray, idx, eps: float, steps: int, alpha: float,
                     stabilized: bool, lower=None, upper=None) -> np.ndarray:
    """L∞-bounded sign-gradient ascent on the loss of ``idx``, moving those rows only.

    ``lower``/``upper`` optionally clip the perturbed rows to a box as well.
    """
    if eps == 0 or steps == 0 or len(idx) == 0:
        return X
    idx = np.asarray(idx, dtype=np.int64)
    base = X[idx]
    Xp = X.copy()
    for _ in range(steps):
        g = input_gradient(model, ds, Xp, idx, stabilized)
        step = alpha * np.sign(g[idx])
        rows = np.clip(Xp[idx] + step, base - eps, base + eps)
        if lower is not None:
            rows = np.clip(rows, lower, upper)
        Xp[idx] = rows
    return Xp


def _run_stage(ds: Dataset, model: Model, cfg: TrainConfig, stage: int, stabilized: bool, groups,
               epochs: int, lr: float, run_dir=None) -> TrainResult:
    model = model.copy()
    names = model.names(groups)
    opt = make_optimizer(cfg, lr)
    result = TrainResult(model)
    X = np.asarray(ds.features)
    adv = cfg.adversarial
    log_fh = None
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        log_fh = open(Path(run_dir) / "train_log.jsonl", "a", encoding="utf-8")
    try:
        for epoch in range(epochs):
            t0 = time.perf_counter()
            last_good = model.copy()
            try:
                feats = X
                if adv is not None and adv.eps > 0 and adv.pgd_steps > 0:
                    feats = perturb_features(model, ds, X, ds.train, adv.eps, adv.pgd_steps, adv.alpha, stabilized)
                tape = Tape()
                fx = None if feats is X else tape.constant(feats)
                res = forward(model, ds, stabilized=stabilized, tape=tape, trainable=names, features=fx,
                              record_V=False)
                L = loss(res.logits, ds.labels, ds.train, res.tensors["classifier.W"], model.config.lambda_orth)
                grads = backward(tape, L)
            except (NonFiniteError, SolverDivergence) as exc:
                raise TrainingDivergence(f"stage {stage} epoch {epoch}: {exc}", last_good, epoch) from exc
            loss_val = L.item()
            if not math.isfinite(loss_val):
                raise TrainingDivergence(f"stage {stage} epoch {epoch}: loss is {loss_val}", last_good, epoch)
            opt.step(model.params, {n: grads[res.tensors[n].uid].data for n in names})
            for n in names:
                if not np.all(np.isfinite(model.params[n])):
                    raise TrainingDivergence(f"stage {stage} epoch {epoch}: parameter {n} became non-finite",
                                             last_good, epoch)
            rec = {
                "epoch": epoch,
                "stage": stage,
                "train_acc": predict(res.logits, ds.labels, ds.train),
                "val_acc": predict(res.logits, ds.labels, ds.val),
                "loss": loss_val,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            }
            result.history.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if epoch + 1 >= cfg.min_epochs and detect_convergence(result.train_acc, cfg.window, cfg.eps_acc):
                result.converged = True
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.stage = stage
    return result


def train_stage1(ds: Dataset, model: Model, cfg: TrainConfig, run_dir=None) -> TrainResult:
    """Fit encoder, attention and classifier on the unprojected flow."""
    return _run_stage(ds, model, cfg, 1, False, BASE_GROUPS + ("classifier",),
                      cfg.stage1_epochs, cfg.lr_stage1, run_dir)


def train_stage2(ds: Dataset, model: Model, cfg: TrainConfig, run_dir=None) -> TrainResult:
    """Fit ICNN and classifier with the projection on; the base flow is frozen."""
    if model.stage < 1:
        raise ContractError("train_stage2 needs a model that finished stage 1")
    if not model.stabilizable:
        raise ContractError("train_stage2 needs a model with a Lyapunov module")
    return _run_stage(ds, model, cfg, 2, True, STAGE2_GROUPS, cfg.stage2_epochs, cfg.lr_stage2, run_dir)


def train(ds: Dataset, model: Model, cfg: TrainConfig, run_dir=None, stabilize: bool | None = None):
    """Stage 1, then stage 2 when the model carries a Lyapunov module."""
    r1 = train_stage1(ds, model, cfg, run_dir)
    if stabilize is None:
        stabilize = model.stabilizable
    if not stabilize:
        return r1, None
    r2 = train_stage2(ds, r1.model, cfg, run_dir)
    return r1, r2


def adversarial_train(ds: Dataset, model: Model, cfg: TrainConfig, run_dir=None):
    if cfg.adversarial is None:
        raise ContractError("adversarial_train needs an adversarial config")
    return train(ds, model, cfg, run_dir)
