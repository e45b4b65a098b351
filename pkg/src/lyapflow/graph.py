"""Graph, feature and label containers; file ingestion; test-set filtering
and node injection under attack budgets.

File grammar
------------
edges     UTF-8 text, ``src<TAB>dst[<TAB>weight]`` per line, 0-based ids,
          lines starting with ``#`` ignored.
features  CSV, one node per line, ``d`` real values.
labels    one integer per line.
splits    JSON ``{"train": [...], "val": [...], "test": [...]}``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import BudgetError, ConfigError, IngestionError

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
UNLABELED = -1

# Benchmark statistics: nodes, edges, features, classes, max injected nodes, max edges per injected node.
BENCHMARKS = {
    "cora": (2708, 5429, 1433, 7, 60, 20),
    "citeseer": (3327, 4732, 3703, 6, 90, 10),
    "computers": (18333, 81894, 6805, 15, 300, 150),
    "pubmed": (19717, 44338, 500, 3, 200, 100),
}

FEATURES_FILE = "features.csv"
EDGES_FILE = "edges.tsv"
LABELS_FILE = "labels.txt"
SPLITS_FILE = "splits.json"


def _frozen(arr, dtype=np.float64):
    a = np.array(arr, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected weighted graph without self-loops."""

    n_nodes: int
    edges: tuple  # canonical (i, j, w) with i < j, sorted

    @classmethod
    def from_edges(cls, n_nodes: int, edges) -> "Graph":
        g, _ = cls._build(n_nodes, edges)
        return g

    @classmethod
    def _build(cls, n_nodes, edges):
        merged: dict[tuple[int, int], float] = {}
        loops = 0
        for e in edges:
            i, j = int(e[0]), int(e[1])
            w = float(e[2]) if len(e) > 2 else 1.0
            if not (0 <= i < n_nodes and 0 <= j < n_nodes):
                raise IngestionError(f"edge ({i}, {j}) references a node outside [0, {n_nodes})")
            if i == j:
                loops += 1
                continue
            key = (i, j) if i < j else (j, i)
            prev = merged.get(key)
            merged[key] = w if prev is None else max(prev, w)
        canon = tuple((i, j, w) for (i, j), w in sorted(merged.items()))
        return cls(n_nodes, canon), loops

    @cached_property
    def adjacency(self) -> np.ndarray:
        W = np.zeros((self.n_nodes, self.n_nodes))
        if self.edges:
            e = np.array(self.edges)
            i, j = e[:, 0].astype(np.int64), e[:, 1].astype(np.int64)
            W[i, j] = e[:, 2]
            W[j, i] = e[:, 2]
        W.setflags(write=False)
        return W

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for i, j, _ in self.edges:
            deg[i] += 1
            deg[j] += 1
        deg.setflags(write=False)
        return deg

    def support(self, include_self: bool = True) -> np.ndarray:
        """Boolean attention support: neighbours, plus the node itself by default."""
        key = "_support_self" if include_self else "_support_noself"
        cached = self.__dict__.get(key)
        if cached is None:
            cached = self.adjacency != 0
            if include_self:
                cached = cached | np.eye(self.n_nodes, dtype=bool)
            cached.setflags(write=False)
            self.__dict__[key] = cached
        return cached

    @cached_property
    def symmetric_normalizer(self) -> np.ndarray:
        """D^{-1/2} M D^{-1/2} over the self-inclusive support M."""
        M = self.support(True).astype(np.float64)
        inv = 1.0 / np.sqrt(M.sum(axis=1))
        B = inv[:, None] * M * inv[None, :]
        B.setflags(write=False)
        return B

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def __eq__(self, other):
        return isinstance(other, Graph) and self.n_nodes == other.n_nodes and self.edges == other.edges

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    splits: dict
    name: str = ""
    class_map: dict = field(default_factory=dict)
    n_raw_edges: int = 0
    n_self_loops_dropped: int = 0
    n_injected: int = 0

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.graph.n_nodes:
            raise IngestionError(
                f"feature rows ({self.features.shape[0]}) != node count ({self.graph.n_nodes})")
        if self.labels.shape != (self.graph.n_nodes,):
            raise IngestionError(
                f"label count ({self.labels.shape[0]}) != node count ({self.graph.n_nodes})")
        seen: set[int] = set()
        for name in SPLIT_NAMES:
            idx = self.splits.get(name)
            if idx is None:
                raise IngestionError(f"split {name!r} missing")
            s = set(idx.tolist())
            if len(s) != len(idx):
                raise IngestionError(f"split {name!r} has duplicate indices")
            if idx.size and (idx.min() < 0 or idx.max() >= self.graph.n_nodes):
                raise IngestionError(f"split {name!r} has indices outside [0, {self.graph.n_nodes})")
            if seen & s:
                raise IngestionError(f"split {name!r} overlaps another split")
            if np.any(self.labels[idx] == UNLABELED):
                raise IngestionError(f"split {name!r} contains unlabeled nodes")
            seen |= s

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def train(self) -> np.ndarray:
        return self.splits["train"]

    @property
    def val(self) -> np.ndarray:
        return self.splits["val"]

    @property
    def test(self) -> np.ndarray:
        return self.splits["test"]

    def with_features(self, features) -> "Dataset":
        features = _frozen(features)
        if features.shape != self.features.shape:
            raise IngestionError(f"replacement features {features.shape} != {self.features.shape}")
        return replace(self, features=features)

    def equivalent(self, other: "Dataset") -> bool:
        return (
            self.graph == other.graph
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and all(np.array_equal(self.splits[k], other.splits[k]) for k in SPLIT_NAMES)
        )


def make_dataset(features, edges, labels, splits, name="", n_classes=None) -> Dataset:
    """Build a validated Dataset from in-memory pieces."""
    features = _frozen(features)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2:
        raise IngestionError("features must be a 2-D array")
    if labels.shape[0] != features.shape[0]:
        raise IngestionError(
            f"feature rows ({features.shape[0]}) and label rows ({labels.shape[0]}) differ")
    graph, loops = Graph._build(features.shape[0], edges)
    if loops:
        log.warning("dropped %d self-loop(s) while building %s", loops, name or "dataset")
    labels, class_map = _remap_classes(labels)
    labels.setflags(write=False)
    split_arrays = {}
    for k in SPLIT_NAMES:
        a = np.asarray(splits.get(k, []), dtype=np.int64)
        a.setflags(write=False)
        split_arrays[k] = a
    if n_classes is None:
        n_classes = len(class_map)
    return Dataset(
        graph=graph, features=features, labels=labels, n_classes=int(n_classes),
        splits=split_arrays, name=name, class_map=class_map,
        n_raw_edges=len(edges), n_self_loops_dropped=loops,
    )


def _remap_classes(labels):
    known = sorted(int(c) for c in np.unique(labels) if c != UNLABELED)
    mapping = {c: i for i, c in enumerate(known)}
    if known != list(range(len(known))):
        log.info("remapped class ids %s to contiguous range", known)
    out = np.array([mapping.get(int(c), UNLABELED) for c in labels], dtype=np.int64)
    return out, mapping


# ------------------------------------------------------------------ file I/O


def read_edges(path) -> list[tuple]:
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise IngestionError(f"{path}:{lineno}: expected 'src<TAB>dst[<TAB>weight]', got {line!r}")
            try:
                i, j = int(parts[0]), int(parts[1])
                w = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: could not parse {line!r}") from None
            if i < 0 or j < 0:
                raise IngestionError(f"{path}:{lineno}: negative node id")
            edges.append((i, j, w))
    return edges


def read_features(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: non-numeric feature value") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise IngestionError(f"{path}:{lineno}: expected {width} values, got {len(row)}")
            rows.append(row)
    if not rows:
        raise IngestionError(f"{path}: no feature rows")
    return np.array(rows, dtype=np.float64)


def read_labels(path) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: label {line!r} is not an integer") from None
    return np.array(out, dtype=np.int64)


def read_splits(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise IngestionError(f"{path}: expected an object with train/val/test lists")
    return {k: [int(i) for i in raw.get(k, [])] for k in SPLIT_NAMES}


def load_dataset(feature_path, edge_path, label_path, split_path, name=None) -> Dataset:
    for p in (feature_path, edge_path, label_path, split_path):
        if not Path(p).is_file():
            raise IngestionError(f"missing input file: {p}")
    features = read_features(feature_path)
    labels = read_labels(label_path)
    if features.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"feature rows ({features.shape[0]}) and label rows ({labels.shape[0]}) differ")
    edges = read_edges(edge_path)
    splits = read_splits(split_path)
    return make_dataset(features, edges, labels, splits, name=name or Path(feature_path).parent.name)


def load_dataset_dir(directory, name=None) -> Dataset:
    d = Path(directory)
    return load_dataset(d / FEATURES_FILE, d / EDGES_FILE, d / LABELS_FILE, d / SPLITS_FILE,
                        name=name or d.name)


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / FEATURES_FILE, "w", encoding="utf-8") as fh:
        for row in ds.features:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(d / EDGES_FILE, "w", encoding="utf-8") as fh:
        for i, j, w in ds.graph.edges:
            fh.write(f"{i}\t{j}\t{w!r}\n")
    with open(d / LABELS_FILE, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(c)}\n" for c in ds.labels)
    (d / SPLITS_FILE).write_text(
        json.dumps({k: ds.splits[k].tolist() for k in SPLIT_NAMES}), encoding="utf-8")
    return d


def synthetic_fixture() -> Dataset:
    """The bundled 24-node, 2-class graph used throughout the tests."""
    root = resources.files("lyapflow") / "data" / "synthetic"
    with resources.as_file(root) as path:
        return load_dataset_dir(path, name="synthetic")


def checksum(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.features).tobytes())
    h.update(repr(ds.graph.edges).encode())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    for k in SPLIT_NAMES:
        h.update(np.ascontiguousarray(ds.splits[k]).tobytes())
    return h.hexdigest()


def stats(ds: Dataset) -> dict:
    budget = BENCHMARKS.get(ds.name.lower())
    return {
        "dataset": ds.name,
        "nodes": ds.n_nodes,
        "edges": ds.n_raw_edges,
        "undirected_edges": ds.graph.n_edges,
        "features": ds.n_features,
        "classes": ds.n_classes,
        "max_inject_nodes": budget[4] if budget else None,
        "max_inject_edges": budget[5] if budget else None,
    }


# --------------------------------------------------------- evaluation subset


def degree_filter_eval_set(ds: Dataset, low_q: float = 0.05, high_q: float = 0.05) -> np.ndarray:
    """Test nodes left after trimming the lowest/highest degree quantiles.

    Nearest-rank counting: ``ceil(q * n)`` nodes are trimmed at each end of
    the test set ordered by (degree, node id), so among equal degrees the
    lower id goes first.
    """
    if low_q < 0 or high_q < 0 or low_q + high_q >= 1:
        raise ConfigError(f"degree filter needs 0 <= low_q, high_q and low_q + high_q < 1 (got {low_q}, {high_q})")
    test = np.asarray(ds.test, dtype=np.int64)
    n = test.size
    deg = ds.graph.degrees[test]
    order = test[np.lexsort((test, deg))]
    k_low = math.ceil(low_q * n - 1e-12) if low_q > 0 else 0
    k_high = math.ceil(high_q * n - 1e-12) if high_q > 0 else 0
    # the high end is ordered by degree descending, lower id first among ties
    order_high = test[np.lexsort((test, -deg))]
    drop = set(order[:k_low].tolist()) | set(order_high[:k_high].tolist())
    kept = np.array(sorted(set(test.tolist()) - drop), dtype=np.int64)
    if kept.size == 0:
        raise ConfigError("degree filter removed every test node")
    return kept


# ----------------------------------------------------------------- injection


@dataclass(frozen=True)
class InjectionBudget:
    max_nodes: int
    max_edges_per_node: int

    def __post_init__(self):
        if self.max_nodes <= 0 or self.max_edges_per_node <= 0:
            raise ConfigError(
                f"injection budget must be strictly positive (got {self.max_nodes}, {self.max_edges_per_node})")

    @classmethod
    def for_benchmark(cls, name: str) -> "InjectionBudget":
        row = BENCHMARKS[name.lower()]
        return cls(row[4], row[5])


def inject_nodes(ds: Dataset, new_features, new_edges, budget: InjectionBudget) -> Dataset:
    """Return a copy of ``ds`` with extra unlabeled nodes appended.

    Injected ids are ``N .. N+m-1``.  Every new edge must touch an injected
    node; original nodes, features, labels and splits are left as they are.
    """
    new_features = np.asarray(new_features, dtype=np.float64)
    if new_features.size == 0:
        new_features = new_features.reshape(0, ds.n_features)
    m = new_features.shape[0]
    if m == 0 and not new_edges:
        return ds
    if new_features.ndim != 2 or new_features.shape[1] != ds.n_features:
        raise IngestionError(f"injected features must have {ds.n_features} columns, got {new_features.shape}")
    if ds.n_injected + m > budget.max_nodes:
        raise BudgetError(
            f"max_nodes exceeded: {ds.n_injected + m} injected nodes > budget {budget.max_nodes}")
    n0 = ds.n_nodes
    total = n0 + m
    first_injected = n0 - ds.n_injected
    neighbours: dict[int, set[int]] = {}
    for e in new_edges:
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < total and 0 <= j < total) or i == j:
            raise BudgetError(f"injected edge ({i}, {j}) is invalid for {total} nodes")
        if i < first_injected and j < first_injected:
            raise BudgetError(f"edge ({i}, {j}) joins two original nodes; injection may not modify them")
        for a, b in ((i, j), (j, i)):
            if a >= first_injected:
                neighbours.setdefault(a, set()).add(b)
    for node, nb in neighbours.items():
        existing = int(ds.graph.degrees[node]) if node < n0 else 0
        if existing + len(nb - _current_neighbours(ds, node)) > budget.max_edges_per_node:
            raise BudgetError(
                f"max_edges_per_node exceeded: node {node} would have degree "
                f"{existing + len(nb)} > budget {budget.max_edges_per_node}")
    graph = Graph.from_edges(total, list(ds.graph.edges) + [tuple(e) for e in new_edges])
    features = _frozen(np.vstack([ds.features, new_features]))
    labels = np.concatenate([ds.labels, np.full(m, UNLABELED, dtype=np.int64)])
    labels.setflags(write=False)
    return replace(ds, graph=graph, features=features, labels=labels,
                   n_injected=ds.n_injected + m, n_raw_edges=ds.n_raw_edges + len(new_edges))


def _current_neighbours(ds: Dataset, node: int) -> set[int]:
    if node >= ds.n_nodes:
        return set()
    return set(np.flatnonzero(ds.graph.adjacency[node]).tolist())


# ------------------------------------------------------------ raw benchmarks


def read_linqs(content_path, cites_path, name=None, n_train_per_class=20, n_val=500, n_test=1000,
               seed=0) -> Dataset:
    """Read the LINQS citation format (``<name>.content`` / ``<name>.cites``).

    Content lines are ``paper_id w_1 ... w_d label``; cites lines are
    ``cited citing``.  Citations to papers missing from the content file are
    dropped.  Splits follow the usual planetoid sizes (20 per class for
    training, then 500 validation and 1000 test nodes) drawn with ``seed``.
    """
    ids, rows, names = [], [], []
    with open(content_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise IngestionError(f"{content_path}:{lineno}: expected 'id features... label'")
            ids.append(parts[0])
            try:
                rows.append([float(v) for v in parts[1:-1]])
            except ValueError:
                raise IngestionError(f"{content_path}:{lineno}: non-numeric feature") from None
            names.append(parts[-1])
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise IngestionError(f"{content_path}: rows have differing feature counts {sorted(width)}")
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names], dtype=np.int64)
    edges, raw, missing = [], 0, 0
    with open(cites_path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                continue
            raw += 1
            a, b = index.get(parts[0]), index.get(parts[1])
            if a is None or b is None:
                missing += 1
                continue
            edges.append((a, b))
    if missing:
        log.warning("dropped %d citation(s) to papers without features", missing)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    train = [int(i) for c in range(len(classes)) for i in order[labels[order] == c][:n_train_per_class]]
    taken = set(train)
    rest = [int(i) for i in order if int(i) not in taken]
    splits = {"train": sorted(train), "val": sorted(rest[:n_val]), "test": sorted(rest[n_val:n_val + n_test])}
    ds = make_dataset(np.array(rows), edges, labels, splits, name=name or Path(content_path).stem)
    return replace(ds, n_raw_edges=raw, class_map={c: i for i, c in enumerate(classes)})


def load_benchmark(directory, name: str) -> Dataset:
    """Load ``name`` from a directory in either the native grammar or the LINQS format."""
    d = Path(directory)
    if (d / FEATURES_FILE).is_file():
        return load_dataset_dir(d, name=name)
    content, cites = d / f"{name}.content", d / f"{name}.cites"
    if content.is_file() and cites.is_file():
        return read_linqs(content, cites, name=name)
    raise IngestionError(f"{d}: neither {FEATURES_FILE} nor {name}.content/{name}.cites found")


# ---------------------------------------------------------------- generators


def generate_fixture(seed: int = 7) -> Dataset:
    """Deterministic 24-node, 2-class graph; class 0 is nodes 0-11.

    The first feature carries the class sign with magnitude at least 1, so
    the classes are linearly separable.
    """
    rng = np.random.default_rng(seed)
    n, half, d = 24, 12, 4
    labels = np.array([0] * half + [1] * half)
    X = rng.normal(scale=0.5, size=(n, d))
    X[:, 0] = np.where(labels == 1, 1.0, -1.0) * (1.0 + np.abs(rng.normal(scale=0.3, size=n)))
    X = np.round(X, 6)
    edges = []
    for base in (0, half):
        for k in range(half):
            edges.append((base + k, base + (k + 1) % half))
        for _ in range(6):
            a, b = rng.choice(half, size=2, replace=False)
            edges.append((base + int(a), base + int(b)))
    for a, b in ((2, 14), (7, 19), (11, 12)):
        edges.append((a, b))
    perm0 = rng.permutation(half)
    perm1 = rng.permutation(half) + half
    splits = {
        "train": sorted(perm0[:4].tolist() + perm1[:4].tolist()),
        "val": sorted(perm0[4:6].tolist() + perm1[4:6].tolist()),
        "test": sorted(perm0[6:].tolist() + perm1[6:].tolist()),
    }
    return make_dataset(X, edges, labels, splits, name="synthetic")


def generate_csbm(n_nodes=2708, n_classes=7, n_features=1433, avg_degree=3.9, homophily=0.81,
                  feature_density=0.013, signal=0.5, n_train_per_class=20, n_val=500, n_test=1000,
                  seed=0, name="csbm") -> Dataset:
    """Contextual stochastic block model with sparse binary features.

    Defaults mimic the size and sparsity of citation benchmarks, for desk
    runs when such data is not at hand.  ``signal`` is the fraction of each
    node's active words drawn from its class vocabulary.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(n_classes, size=n_nodes)
    n_edges = int(round(avg_degree * n_nodes / 2))
    by_class = [np.flatnonzero(labels == c) for c in range(n_classes)]
    edges = set()
    while len(edges) < n_edges:
        i = int(rng.integers(n_nodes))
        if rng.random() < homophily:
            j = int(rng.choice(by_class[labels[i]]))
        else:
            j = int(rng.integers(n_nodes))
        if i != j:
            edges.add((min(i, j), max(i, j)))
    vocab = np.array_split(rng.permutation(n_features), n_classes)
    words = max(1, int(round(feature_density * n_features)))
    X = np.zeros((n_nodes, n_features))
    for i in range(n_nodes):
        own = rng.random(words) < signal
        picks = np.where(own, rng.choice(vocab[labels[i]], size=words), rng.integers(n_features, size=words))
        X[i, picks] = 1.0
    order = rng.permutation(n_nodes)
    train = []
    for c in range(n_classes):
        train.extend([int(i) for i in order if labels[i] == c][:n_train_per_class])
    rest = [int(i) for i in order if int(i) not in set(train)]
    splits = {"train": sorted(train), "val": sorted(rest[:n_val]), "test": sorted(rest[n_val:n_val + n_test])}
    return make_dataset(X, sorted(edges), labels, splits, name=name)
