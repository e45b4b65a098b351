"""Run configuration: one YAML file fully specifies a train/attack/certify run.

Validation reports the offending field path and, when known, the line in
the source file:

    run.yaml:14: train.window: convergence window must be >= 2, got 1
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError, IngestionError
from .graph import (
    EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLITS_FILE, Dataset, InjectionBudget, generate_csbm, load_benchmark,
    load_dataset,
    synthetic_fixture,
)
from .flows import FLOW_KINDS
from .lyapunov import LyapunovConfig
from .model import ModelConfig
from .robustness import AttackConfig
from .solvers import SolverConfig
from .training import AdversarialConfig, TrainConfig


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "synthetic"
    synthetic: bool = False
    path: str | None = None
    features: str | None = None
    edges: str | None = None
    labels: str | None = None
    splits: str | None = None
    csbm: dict | None = None

    def files(self) -> tuple | None:
        """Input files: the four native files, or a LINQS content/cites pair under ``path``."""
        if self.path is not None:
            root = Path(self.path)
            native = (root / FEATURES_FILE, root / EDGES_FILE, root / LABELS_FILE, root / SPLITS_FILE)
            linqs = (root / f"{self.name}.content", root / f"{self.name}.cites")
            if not native[0].is_file() and all(p.is_file() for p in linqs):
                return linqs
            return native
        if self.features is not None:
            return tuple(Path(p) for p in (self.features, self.edges, self.labels, self.splits))
        return None

    def load(self) -> Dataset:
        if self.synthetic:
            return synthetic_fixture()
        if self.csbm is not None:
            return generate_csbm(name=self.name, **self.csbm)
        if self.path is not None:
            return load_benchmark(self.path, self.name)
        files = self.files()
        if files is None:
            raise ConfigError("dataset: give 'synthetic: true', 'path', 'csbm' or the four file paths")
        return load_dataset(*files, name=self.name)


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None and v is not False}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec
    model: ModelConfig
    train: TrainConfig
    attacks: tuple = ()
    seeds: tuple = (0,)
    low_q: float = 0.05
    high_q: float = 0.05
    output: str = "runs"
    source: str | None = None

    @property
    def stabilized(self) -> bool:
        return self.model.lyapunov is not None

    def echo(self) -> dict:
        """Plain-data copy in the config-file layout, embedded in every output.

        ``parse_config(cfg.echo())`` rebuilds an equal configuration.
        """
        model = {k: v for k, v in self.model.to_dict().items() if k not in ("solver", "lyapunov")}
        model["stabilized"] = self.stabilized
        out = {
            "dataset": _drop_none(dataclasses.asdict(self.dataset)),
            "model": model,
            "solver": dataclasses.asdict(self.model.solver),
        }
        if self.model.lyapunov is not None:
            out["lyapunov"] = {k: v for k, v in dataclasses.asdict(self.model.lyapunov).items() if k != "mode"}
            out["lyapunov"]["hidden"] = list(self.model.lyapunov.hidden)
        train = dataclasses.asdict(self.train)
        if train["adversarial"] is not None:
            train["adversarial"] = _drop_none(train["adversarial"])
        out["train"] = train
        out["attacks"] = [_drop_none(a.to_dict()) for a in self.attacks]
        out["eval"] = {"low_q": self.low_q, "high_q": self.high_q}
        out["seeds"] = list(self.seeds)
        out["output"] = self.output
        return out

    def with_seeds(self, seeds) -> "RunConfig":
        return dataclasses.replace(self, seeds=tuple(int(s) for s in seeds))


# ----------------------------------------------------------------- defaults


def default_config() -> dict:
    """The complete default configuration as plain data."""
    solver = SolverConfig()
    lyap = LyapunovConfig()
    model = ModelConfig()
    train = TrainConfig()
    return {
        "dataset": {"name": "synthetic", "synthetic": True},
        "model": {
            "flow": model.flow, "hidden": model.hidden, "lambda_orth": model.lambda_orth, "d_k": model.d_k,
            "graphcon_gamma": model.graphcon_gamma, "graphcon_alpha": model.graphcon_alpha,
            "include_self": model.include_self, "stabilized": True,
        },
        "solver": dataclasses.asdict(solver),
        "lyapunov": {"c": lyap.c, "alpha3": lyap.alpha3, "d": lyap.d, "hidden": list(lyap.hidden)},
        "train": {k: v for k, v in dataclasses.asdict(train).items() if k != "adversarial"} | {"adversarial": None},
        "attacks": [{"kind": "pgd_features", "eps": 0.1, "steps": 20, "step_size": None}],
        "eval": {"low_q": 0.05, "high_q": 0.05},
        "seeds": [0],
        "output": "runs",
    }


DEFAULTS_NOTES = {
    "dataset": "synthetic: bundled 24-node fixture | path: directory with features.csv, edges.tsv, labels.txt, "
               "splits.json | features/edges/labels/splits: explicit files | csbm: generator arguments",
    "model.flow": "grand | graphbel | graphcon",
    "model.d_k": "attention scale; null means sqrt(hidden)",
    "model.stabilized": "false trains the base flow only (no Lyapunov module)",
    "solver.scheme": "euler | rk4 | frac_abm (frac_abm is required when beta < 1)",
    "solver.memory_window": "null keeps the full fractional memory",
    "lyapunov.c": "exponential decay rate (integer mode)",
    "lyapunov.alpha3": "decay rate in the fractional decrease condition",
    "lyapunov.d": "smooth ReLU width, also used to map raw ICNN pass-through weights",
    "train.optimizer": "momentum | adam",
    "train.adversarial": "null, or {eps, pgd_steps, step_size} for PGD adversarial training",
    "attacks[].kind": "pgd_features | pgd_inject | random_inject",
    "attacks[].budget": "{max_nodes, max_edges_per_node} or a benchmark name (cora, citeseer, computers, pubmed)",
    "eval": "degree filter quantiles applied to the clean test set",
}


def defaults_reference() -> str:
    """A commented YAML page listing every option with its default."""
    lines = ["# lyapflow run configuration: every option with its default value", "#"]
    for key, note in DEFAULTS_NOTES.items():
        lines.append(f"# {key}: {note}")
    lines.append("")
    lines.append(yaml.safe_dump(default_config(), sort_keys=False).rstrip())
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------- validation


def _line_map(text: str) -> dict:
    """Map key paths like ('train', 'window') to 1-based source lines."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (str(k.value),)
                lines[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = path + (i,)
                lines[p] = v.start_mark.line + 1
                walk(v, p)

    if root is not None:
        walk(root, ())
    return lines


class _Validator:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def fail(self, path: tuple, message: str):
        where = self.source
        for k in range(len(path), 0, -1):
            if path[:k] in self.lines:
                where = f"{self.source}:{self.lines[path[:k]]}"
                break
        dotted = ".".join(f"[{p}]" if isinstance(p, int) else str(p) for p in path).replace(".[", "[")
        raise ConfigError(f"{where}: {dotted or '<root>'}: {message}")

    def section(self, raw: dict, path: tuple, allowed) -> dict:
        return self.mapping(raw.get(path[-1], {}) if path else raw, path, allowed)

    def mapping(self, value, path: tuple, allowed) -> dict:
        if value is None:
            value = {}
        if not isinstance(value, dict):
            self.fail(path, f"expected a mapping, got {type(value).__name__}")
        unknown = sorted(set(value) - set(allowed))
        if unknown:
            self.fail(path + (unknown[0],), f"unknown option (allowed: {', '.join(sorted(allowed))})")
        return value

    def build(self, cls, kwargs: dict, path: tuple):
        try:
            return cls(**kwargs)
        except ConfigError as exc:
            key = next((k for k in kwargs if k in str(exc)), None)
            self.fail(path + ((key,) if key else ()), str(exc))
        except TypeError as exc:
            self.fail(path, f"invalid value: {exc}")


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _typed(v: _Validator, section: dict, path: tuple, types: dict):
    for key, expected in types.items():
        if key in section and section[key] is not None and not isinstance(section[key], expected):
            if expected is float and isinstance(section[key], int) and not isinstance(section[key], bool):
                section[key] = float(section[key])
                continue
            name = expected.__name__ if isinstance(expected, type) else "/".join(t.__name__ for t in expected)
            v.fail(path + (key,), f"expected {name}, got {type(section[key]).__name__} {section[key]!r}")


def parse_config(raw: dict, source: str = "<config>", lines: dict | None = None,
                 check_files: bool = True) -> RunConfig:
    v = _Validator(source, lines or {})
    if not isinstance(raw, dict):
        v.fail((), "top level must be a mapping")
    top = {"dataset", "model", "solver", "lyapunov", "train", "attacks", "eval", "seeds", "output"}
    v.section(raw, (), top)

    ds_raw = dict(v.section(raw, ("dataset",), _fields(DatasetSpec)))
    _typed(v, ds_raw, ("dataset",), {"synthetic": bool, "name": str, "path": str, "csbm": dict})
    ds_spec = v.build(DatasetSpec, ds_raw, ("dataset",))
    if not ds_raw:
        ds_spec = dataclasses.replace(ds_spec, synthetic=True)
    if check_files and ds_spec.files() is not None:
        for i, p in enumerate(ds_spec.files()):
            if not p.is_file():
                key = "path" if ds_spec.path is not None else ("features", "edges", "labels", "splits")[i]
                v.fail(("dataset", key), f"file not found: {p}")

    solver_raw = dict(v.section(raw, ("solver",), _fields(SolverConfig)))
    _typed(v, solver_raw, ("solver",), {"beta": float, "step_h": float, "t_end": float, "scheme": str,
                                        "memory_window": int})
    solver = v.build(SolverConfig, solver_raw, ("solver",))

    model_raw = dict(v.section(raw, ("model",), (_fields(ModelConfig) - {"solver", "lyapunov"}) | {"stabilized"}))
    _typed(v, model_raw, ("model",), {"flow": str, "hidden": int, "lambda_orth": float, "d_k": float,
                                      "graphcon_gamma": float, "graphcon_alpha": float, "include_self": bool,
                                      "stabilized": bool})
    stabilized = model_raw.pop("stabilized", True)

    lyap = None
    lyap_raw = dict(v.section(raw, ("lyapunov",), _fields(LyapunovConfig) - {"mode"}))
    _typed(v, lyap_raw, ("lyapunov",), {"c": float, "alpha3": float, "d": float, "hidden": list})
    if stabilized:
        if "hidden" in lyap_raw:
            lyap_raw["hidden"] = tuple(lyap_raw["hidden"])
        lyap_raw["mode"] = "fractional" if solver.fractional else "integer"
        lyap = v.build(LyapunovConfig, lyap_raw, ("lyapunov",))
    if "flow" in model_raw:
        if model_raw["flow"] not in FLOW_KINDS:
            v.fail(("model", "flow"), f"must be one of {FLOW_KINDS}, got {model_raw['flow']!r}")
    model = v.build(ModelConfig, dict(model_raw, solver=solver, lyapunov=lyap), ("model",))

    train_raw = dict(v.section(raw, ("train",), _fields(TrainConfig)))
    _typed(v, train_raw, ("train",), {"stage1_epochs": int, "stage2_epochs": int, "lr_stage1": float,
                                      "lr_stage2": float, "optimizer": str, "momentum": float, "window": int,
                                      "eps_acc": float, "min_epochs": int, "seed": int})
    adv = train_raw.pop("adversarial", None)
    if adv is not None:
        adv_raw = dict(v.mapping(adv, ("train", "adversarial"), _fields(AdversarialConfig)))
        _typed(v, adv_raw, ("train", "adversarial"), {"eps": float, "pgd_steps": int, "step_size": float})
        train_raw["adversarial"] = v.build(AdversarialConfig, adv_raw, ("train", "adversarial"))
    train = v.build(TrainConfig, train_raw, ("train",))

    attacks = []
    atk_list = raw.get("attacks", []) or []
    if not isinstance(atk_list, list):
        v.fail(("attacks",), "expected a list of attack mappings")
    for i, a in enumerate(atk_list):
        path = ("attacks", i)
        if not isinstance(a, dict):
            v.fail(path, "expected a mapping")
        a = dict(a)
        unknown = sorted(set(a) - _fields(AttackConfig))
        if unknown:
            v.fail(path + (unknown[0],), "unknown option")
        _typed(v, a, path, {"kind": str, "eps": float, "steps": int, "step_size": float, "n_inject": int})
        budget = a.get("budget")
        if isinstance(budget, str):
            try:
                a["budget"] = InjectionBudget.for_benchmark(budget)
            except KeyError:
                v.fail(path + ("budget",), f"unknown benchmark {budget!r}")
        elif isinstance(budget, dict):
            bud = dict(budget)
            _typed(v, bud, path + ("budget",), {"max_nodes": int, "max_edges_per_node": int})
            a["budget"] = v.build(InjectionBudget, bud, path + ("budget",))
        elif budget is not None:
            v.fail(path + ("budget",), "expected a mapping or a benchmark name")
        attacks.append(v.build(AttackConfig, a, path))

    ev = v.section(raw, ("eval",), {"low_q", "high_q"})
    low_q, high_q = float(ev.get("low_q", 0.05)), float(ev.get("high_q", 0.05))
    if low_q < 0 or high_q < 0 or low_q + high_q >= 1:
        v.fail(("eval",), f"need 0 <= low_q, high_q and low_q + high_q < 1 (got {low_q}, {high_q})")

    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        v.fail(("seeds",), "expected a non-empty list of integers")
    output = raw.get("output", "runs")
    if not isinstance(output, str):
        v.fail(("output",), "expected a directory path")
    return RunConfig(ds_spec, model, train, tuple(attacks), tuple(seeds), low_q, high_q, output, source)


def load_config(path, check_files: bool = True) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
    raw = raw or {}
    cfg = parse_config(raw, str(path), _line_map(text), check_files=False)
    # relative data paths resolve against the config file's directory
    spec = cfg.dataset
    base = path.parent
    fix = lambda p: None if p is None else str(p if Path(p).is_absolute() else base / p)  # noqa: E731
    spec = dataclasses.replace(spec, path=fix(spec.path), features=fix(spec.features), edges=fix(spec.edges),
                               labels=fix(spec.labels), splits=fix(spec.splits))
    cfg = dataclasses.replace(cfg, dataset=spec)
    if check_files and spec.files() is not None:
        lines = _line_map(text)
        v = _Validator(str(path), lines)
        for i, p in enumerate(spec.files()):
            if not p.is_file():
                key = "path" if spec.path is not None else ("features", "edges", "labels", "splits")[i]
                v.fail(("dataset", key), f"file not found: {p}")
    return cfg


def load_dataset_for(cfg: RunConfig) -> Dataset:
    try:
        return cfg.dataset.load()
    except IngestionError:
        raise
    except TypeError as exc:
        raise ConfigError(f"dataset: {exc}") from None
