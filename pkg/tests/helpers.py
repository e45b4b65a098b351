"""Small builders shared by several test modules."""
import numpy as np

from lyapflow.graph import make_dataset
from lyapflow.model import ModelConfig, init_model
from lyapflow.solvers import SolverConfig


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def toy_dataset(n=3, edges=((0, 1),), d=2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, d))
    labels = [i % 2 for i in range(n)]
    splits = {"train": [0], "val": [], "test": list(range(1, n))}
    return make_dataset(X, [(i, j, 1.0) for i, j in edges], labels, splits, name="toy")


def path_dataset(n=20):
    X = np.zeros((n, 1))
    labels = [0] * n
    splits = {"train": [], "val": [], "test": list(range(n))}
    return make_dataset(X, [(i, i + 1, 1.0) for i in range(n - 1)], labels, splits, name="path",
                        n_classes=1)


def small_model(ds, flow="grand", scheme="euler", beta=1.0, h=0.5, t_end=2.5, hidden=6,
                icnn_hidden=(8,), seed=0, lyapunov=True, **lyap_kw):
    from lyapflow.lyapunov import LyapunovConfig

    lcfg = LyapunovConfig(hidden=icnn_hidden, **lyap_kw) if lyapunov else None
    cfg = ModelConfig(flow=flow, solver=SolverConfig(beta, h, t_end, scheme), lyapunov=lcfg, hidden=hidden)
    return init_model(cfg, ds.n_features, ds.n_classes, np.random.default_rng(seed))


GOLDEN = __import__("pathlib").Path(__file__).parent / "golden"


def golden(name, compute):
    """Frozen reference values in tests/golden/<name>.json.

    Set LYAPFLOW_REGEN_GOLDEN=1 to (re)write the file from ``compute()``
    after checking the new values by hand.
    """
    import json
    import os

    path = GOLDEN / f"{name}.json"
    if os.environ.get("LYAPFLOW_REGEN_GOLDEN") == "1":
        path.parent.mkdir(exist_ok=True)
        path.write_text(json.dumps(compute(), indent=1, sort_keys=True) + "\n")
    if not path.is_file():
        raise AssertionError(f"golden file {path} is missing; rerun with LYAPFLOW_REGEN_GOLDEN=1")
    return json.loads(path.read_text())


def permute_dataset(ds, perm):
    """Relabel node i as perm[i]."""
    inv = np.argsort(perm)
    X = ds.features[inv]
    labels = ds.labels[inv]
    edges = [(int(perm[i]), int(perm[j]), w) for i, j, w in ds.graph.edges]
    splits = {k: sorted(int(perm[i]) for i in ds.splits[k]) for k in ("train", "val", "test")}
    return make_dataset(X, edges, labels, splits, name=ds.name, n_classes=ds.n_classes)
