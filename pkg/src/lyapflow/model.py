"""Encoder -> (projected) flow -> classifier, plus loss, accuracy and checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError
from .flows import AttentionParams, FlowField
from .graph import Dataset
from .lyapunov import ICNNParams, LyapunovConfig, ProjectedRHS, init_icnn
from .solvers import SolverConfig, TrajectoryRecord, solve
from .tensor import Tape, Tensor, backward

FORMAT_VERSION = 1

BASE_GROUPS = ("encoder", "flow")
STAGE2_GROUPS = ("icnn", "classifier")


@dataclass(frozen=True)
class ModelConfig:
    flow: str = "grand"
    solver: SolverConfig = field(default_factory=SolverConfig)
    lyapunov: LyapunovConfig | None = field(default_factory=LyapunovConfig)
    hidden: int = 16
    lambda_orth: float = 1e-2
    d_k: float | None = None
    graphcon_gamma: float = 1.0
    graphcon_alpha: float = 1.0
    include_self: bool = True

    def __post_init__(self):
        if self.lambda_orth < 0:
            raise ConfigError(f"lambda_orth must be >= 0, got {self.lambda_orth}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        if self.lyapunov is not None:
            want = "fractional" if self.solver.fractional else "integer"
            if self.lyapunov.mode != want:
                object.__setattr__(self, "lyapunov", replace(self.lyapunov, mode=want))

    @property
    def attention_scale(self) -> float:
        return self.d_k if self.d_k is not None else math.sqrt(self.hidden)

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.lyapunov is not None:
            out["lyapunov"]["hidden"] = list(self.lyapunov.hidden)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["solver"] = SolverConfig(**raw.get("solver", {}))
        lyap = raw.get("lyapunov", {})
        if lyap is not None:
            lyap = dict(lyap)
            if "hidden" in lyap:
                lyap["hidden"] = tuple(lyap["hidden"])
            lyap = LyapunovConfig(**lyap)
        raw["lyapunov"] = lyap
        return cls(**raw)


@dataclass
class Model:
    config: ModelConfig
    params: dict  # name -> float64 ndarray
    n_features: int
    n_classes: int
    stage: int = 0

    @property
    def stabilizable(self) -> bool:
        return self.config.lyapunov is not None

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()},
                     self.n_features, self.n_classes, self.stage)

    def names(self, groups=None) -> list[str]:
        if groups is None:
            return sorted(self.params)
        return sorted(k for k in self.params if k.split(".", 1)[0] in groups)

    def checksum(self, groups=None) -> str:
        h = hashlib.sha256()
        for k in self.names(groups):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def _orthogonal(rng, rows, cols):
    A = rng.normal(size=(max(rows, cols), min(rows, cols)))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    return Q if rows >= cols else Q.T


def init_model(config: ModelConfig, n_features: int, n_classes: int, rng: np.random.Generator) -> Model:
    h = config.hidden
    p = {
        "encoder.W": rng.normal(scale=1.0 / math.sqrt(n_features), size=(n_features, h)),
        "encoder.b": np.zeros((1, h)),
        "flow.WK": rng.normal(scale=1.0 / math.sqrt(h), size=(h, h)),
        "flow.WQ": rng.normal(scale=1.0 / math.sqrt(h), size=(h, h)),
        "classifier.W": _orthogonal(rng, h, n_classes),
        "classifier.b": np.zeros((1, n_classes)),
    }
    if config.lyapunov is not None:
        icnn = init_icnn(rng, h, config.lyapunov.hidden, config.lyapunov.d)
        for i, (W, b) in enumerate(zip(icnn.W, icnn.b)):
            p[f"icnn.W{i}"] = np.array(W.data)
            p[f"icnn.b{i}"] = np.array(b.data)
        for i, P in enumerate(icnn.P_raw or (), start=1):
            p[f"icnn.P{i}_raw"] = np.array(P.data)
    return Model(config, p, n_features, n_classes)


def _icnn_from(tensors: dict, d: float) -> ICNNParams:
    k = 0
    while f"icnn.W{k}" in tensors:
        k += 1
    W = tuple(tensors[f"icnn.W{i}"] for i in range(k))
    b = tuple(tensors[f"icnn.b{i}"] for i in range(k))
    P = tuple(tensors[f"icnn.P{i}_raw"] for i in range(1, k)) or None
    if P is None and k > 1:
        raise CheckpointError("checkpoint lacks ICNN pass-through weights")
    return ICNNParams(W, b, P, None, d)


def icnn_params(model: Model) -> ICNNParams:
    if not model.stabilizable:
        raise ContractError("model has no Lyapunov module")
    return _icnn_from({k: Tensor(v) for k, v in model.params.items()}, model.config.lyapunov.d)


@dataclass
class ForwardResult:
    logits: Tensor
    record: TrajectoryRecord
    tensors: dict          # name -> Tensor used in this pass
    fired: list            # per-rhs-call projection flags (empty when unstabilized)
    icnn: ICNNParams | None = None


def forward(model: Model, dataset: Dataset, stabilized: bool | None = None, tape: Tape | None = None,
            trainable=None, features: Tensor | None = None, record_V: bool | None = None) -> ForwardResult:
    """Logits U(T) W_c + b_c for every node, with the trajectory that produced them.

    ``trainable`` lists parameter names watched on ``tape`` (all of them by
    default when a tape is given).  ``features`` replaces the dataset
    features, for attacks that differentiate with respect to the input.
    """
    cfg = model.config
    if stabilized is None:
        stabilized = model.stabilizable
    if stabilized and not model.stabilizable:
        raise ContractError("stabilized forward requested for a model without a Lyapunov module")
    if dataset.n_features != model.n_features:
        raise ContractError(f"model expects {model.n_features} features, dataset has {dataset.n_features}")
    watch = set(model.params) if (tape is not None and trainable is None) else set(trainable or ())
    tensors = {}
    for name, value in model.params.items():
        tensors[name] = tape.watch(value) if (tape is not None and name in watch) else Tensor(value)
    X = features if features is not None else Tensor._wrap(dataset.features)
    U0 = X @ tensors["encoder.W"] + tensors["encoder.b"]
    flow = FlowField(
        cfg.flow, AttentionParams(tensors["flow.WK"], tensors["flow.WQ"], cfg.attention_scale),
        graphcon_gamma=cfg.graphcon_gamma, graphcon_alpha=cfg.graphcon_alpha,
        include_self=cfg.include_self,
    )
    graph = dataset.graph

    def base_rhs(state, v_history=None):
        return flow.rhs(state, graph)

    rhs, value_fn, icnn, fired = base_rhs, None, None, []
    if stabilized:
        icnn = _icnn_from(tensors, cfg.lyapunov.d)
        rhs = ProjectedRHS(base_rhs, icnn, cfg.lyapunov, cfg.solver.beta, cfg.solver.step_h)
        fired = rhs.fired
        if record_V is None:
            record_V = True
        value_fn = rhs.value if record_V or cfg.solver.fractional else None
    record = solve(rhs, flow.initial_state(U0), cfg.solver, value_fn)
    logits = record.final.U @ tensors["classifier.W"] + tensors["classifier.b"]
    return ForwardResult(logits, record, tensors, fired, icnn)


def loss(logits: Tensor, labels, split, classifier_W: Tensor, lambda_orth: float) -> Tensor:
    """Mean cross-entropy over ``split`` plus λ ||W_c^T W_c - I||_F^2."""
    idx = np.asarray(split, dtype=np.int64)
    if idx.size == 0:
        raise ContractError("loss: split is empty")
    labels = np.asarray(labels)
    y = labels[idx]
    if np.any(y < 0):
        raise ContractError("loss: split contains unlabeled nodes")
    picked = T.take_rows(logits, idx)
    onehot = np.zeros(picked.shape)
    onehot[np.arange(idx.size), y] = 1.0
    ce = T.scale(T.sum(T.log_softmax(picked) * Tensor._wrap(onehot)), -1.0 / idx.size)
    if lambda_orth == 0:
        return ce
    gram = classifier_W.T @ classifier_W - Tensor._wrap(np.eye(classifier_W.cols))
    return ce + T.scale(T.squared_frobenius_norm(gram), lambda_orth)


def input_gradient(model: Model, dataset: Dataset, X: np.ndarray, idx, stabilized: bool | None = None,
                   labels=None) -> np.ndarray:
    """Gradient of the mean cross-entropy on ``idx`` with respect to the features."""
    tape = Tape()
    feats = tape.watch(X)
    res = forward(model, dataset, stabilized=stabilized, tape=tape, trainable=(), features=feats, record_V=False)
    L = loss(res.logits, dataset.labels if labels is None else labels, idx, res.tensors["classifier.W"], 0.0)
    return backward(tape, L)[feats.uid].data


def predictions(logits) -> np.ndarray:
    L = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(L, axis=1)  # first maximum: ties go to the lower class id


def predict(logits, labels, eval_indices) -> float:
    idx = np.asarray(eval_indices, dtype=np.int64)
    if idx.size == 0:
        return float("nan")
    return float(np.mean(predictions(logits)[idx] == np.asarray(labels)[idx]))


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: Model, extra: dict | None = None) -> Path:
    path = Path(path)
    payload = {
        "format_version": FORMAT_VERSION,
        "stage": model.stage,
        "n_features": model.n_features,
        "n_classes": model.n_classes,
        "config": model.config.to_dict(),
        "params": {
            k: {"shape": list(model.params[k].shape), "values": model.params[k].ravel().tolist()}
            for k in sorted(model.params)
        },
    }
    if extra:
        payload["extra"] = extra
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} is corrupt: {exc}") from None
    if not isinstance(raw, dict) or "format_version" not in raw:
        raise CheckpointError(f"checkpoint {path} has no format_version")
    if raw["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format_version {raw['format_version']}, expected {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(raw["config"])
        params = {}
        for name, entry in raw["params"].items():
            arr = np.array(entry["values"], dtype=np.float64)
            shape = tuple(entry["shape"])
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"parameter {name}: {arr.size} values for shape {shape}")
            params[name] = arr.reshape(shape)
        return Model(config, params, int(raw["n_features"]), int(raw["n_classes"]), int(raw.get("stage", 0)))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is malformed: {exc}") from None
