"""Graph containers, plain-text/JSON ingestion, SBM generation and adjacency transforms."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

FEATURE_KINDS = ("binary", "continuous")


@dataclass(frozen=True, eq=False)
class Graph:
    """An undirected, unweighted attributed graph.

    ``adjacency`` is a dense symmetric 0/1 matrix with zero diagonal.
    """

    features: np.ndarray
    adjacency: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    test_mask: np.ndarray
    feature_kind: str = "binary"

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        adj = np.array(self.adjacency, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        train = np.array(self.train_mask, dtype=bool)
        test = np.array(self.test_mask, dtype=bool)
        n = feats.shape[0]
        if feats.ndim != 2:
            raise FormatError("features must be a 2-D matrix")
        if adj.shape != (n, n):
            raise FormatError(f"adjacency shape {adj.shape} does not match {n} nodes")
        if not np.array_equal(adj, adj.T) or np.any(np.diag(adj) != 0):
            raise FormatError("adjacency must be symmetric with zero diagonal")
        if not np.all((adj == 0) | (adj == 1)):
            raise FormatError("adjacency entries must be 0 or 1")
        if labels.shape != (n,) or train.shape != (n,) or test.shape != (n,):
            raise FormatError("labels and masks must have one entry per node")
        if np.any(train & test):
            raise FormatError("train and test masks overlap")
        if self.feature_kind not in FEATURE_KINDS:
            raise ConfigError(f"unknown feature kind {self.feature_kind!r}")
        if self.feature_kind == "binary" and not np.all((feats == 0) | (feats == 1)):
            raise FormatError("binary features must be 0 or 1")
        for name, arr in (("features", feats), ("adjacency", adj), ("labels", labels),
                          ("train_mask", train), ("test_mask", test)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n else 0

    def edges(self) -> list[tuple[int, int]]:
        u, v = np.nonzero(np.triu(self.adjacency, 1))
        return [(int(a), int(b)) for a, b in zip(u, v)]

    def density(self) -> float:
        if self.n < 2:
            return 0.0
        return len(self.edges()) / (self.n * (self.n - 1) / 2)

    def feature_density(self) -> float:
        return float(np.mean(self.features != 0))

    def replace(self, **changes) -> "Graph":
        fields = dict(features=self.features, adjacency=self.adjacency, labels=self.labels,
                      train_mask=self.train_mask, test_mask=self.test_mask,
                      feature_kind=self.feature_kind)
        fields.update(changes)
        return Graph(**fields)

    def permute(self, perm) -> "Graph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        p = np.asarray(perm)
        return self.replace(features=self.features[p], adjacency=self.adjacency[np.ix_(p, p)],
                            labels=self.labels[p], train_mask=self.train_mask[p],
                            test_mask=self.test_mask[p])

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.feature_kind == other.feature_kind
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("features", "adjacency", "labels", "train_mask", "test_mask")))


def adjacency_from_edges(n: int, edges) -> np.ndarray:
    adj = np.zeros((n, n))
    for u, v in edges:
        if not (0 <= u < n and 0 <= v < n):
            raise FormatError(f"edge ({u}, {v}) out of range for {n} nodes")
        if u != v:
            adj[u, v] = adj[v, u] = 1.0
    return adj


def split_masks(n: int, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    train = np.zeros(n, dtype=bool)
    train[order[:n_train]] = True
    return train, ~train


# ---------------------------------------------------------------- file formats


def _read_edges(path) -> list[tuple[int, int]]:
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'u v', got {line!r}")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer node index") from None
    return edges


def _read_features(path, header: bool) -> np.ndarray:
    rows = []
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if header:
        lines = lines[1:]
    for lineno, line in enumerate(lines, 1 + int(header)):
        try:
            rows.append([float(x) for x in line.split(",")])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric feature value") from None
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise FormatError(f"{path}: ragged feature rows (widths {sorted(widths)})")
    return np.array(rows, dtype=np.float64).reshape(len(rows), widths.pop() if widths else 0)


def _read_labels(path) -> np.ndarray:
    try:
        return np.array([int(ln) for ln in Path(path).read_text().split()], dtype=np.int64)
    except ValueError:
        raise FormatError(f"{path}: labels must be integers") from None


def load_graph(edge_path, feature_path, label_path, *, header: bool = False,
               feature_kind: str | None = None, split_seed: int = 0) -> Graph:
    """Read a graph from an edge list, a feature CSV and a label file.

    Directed edges are symmetrized and self-loops dropped. Masks are an 80/20
    seeded split. The feature kind is inferred (all entries 0/1 means binary)
    unless given.
    """
    try:
        features = _read_features(feature_path, header)
        labels = _read_labels(label_path)
        edges = _read_edges(edge_path)
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    n = features.shape[0]
    if labels.shape[0] != n:
        raise FormatError(f"{n} feature rows but {labels.shape[0]} labels")
    if feature_kind is None:
        feature_kind = "binary" if np.all((features == 0) | (features == 1)) else "continuous"
    train, test = split_masks(n, split_seed)
    return Graph(features, adjacency_from_edges(n, edges), labels, train, test, feature_kind)


def graph_to_dict(g: Graph) -> dict:
    return {
        "n": g.n,
        "d": g.d,
        "feature_kind": g.feature_kind,
        "edges": [list(e) for e in g.edges()],
        "features": g.features.tolist(),
        "labels": g.labels.tolist(),
        "train_mask": g.train_mask.tolist(),
        "test_mask": g.test_mask.tolist(),
    }


def graph_from_dict(doc: dict) -> Graph:
    try:
        n, d = int(doc["n"]), int(doc["d"])
        features = np.array(doc["features"], dtype=np.float64).reshape(n, d)
        return Graph(features, adjacency_from_edges(n, doc["edges"]), doc["labels"],
                     doc["train_mask"], doc["test_mask"], doc["feature_kind"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed graph document: {exc}") from exc


def save_graph(g: Graph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(g)))


def read_graph_json(path) -> Graph:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return graph_from_dict(doc)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SbmSpec:
    """Stochastic block model with class-dependent features.

    Each class owns the feature columns ``j`` with ``j % blocks == c``. For
    binary features those columns fire at ``base_rate * (1 + signal)`` and the
    rest at ``base_rate * (1 - signal)``; continuous features are Gaussian
    with the owned columns shifted by ``signal``.
    """

    blocks: int = 4
    nodes_per_block: int = 75
    p_in: float = 0.1
    p_out: float = 0.01
    d: int = 64
    signal: float = 0.5
    seed: int = 0
    base_rate: float = 0.1
    feature_kind: str = "binary"

    def __post_init__(self):
        if not 0 <= self.p_out <= self.p_in <= 1:
            raise ConfigError("need 0 <= p_out <= p_in <= 1")
        if self.signal < 0:
            raise ConfigError("signal must be non-negative")
        if self.blocks < 1 or self.nodes_per_block < 1 or self.d < 1:
            raise ConfigError("blocks, nodes_per_block and d must be positive")
        if self.feature_kind not in FEATURE_KINDS:
            raise ConfigError(f"unknown feature kind {self.feature_kind!r}")


def generate_sbm(spec: SbmSpec) -> Graph:
    rng = np.random.default_rng(spec.seed)
    n = spec.blocks * spec.nodes_per_block
    labels = np.repeat(np.arange(spec.blocks), spec.nodes_per_block)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, spec.p_in, spec.p_out)
    upper = np.triu(rng.random((n, n)) < prob, 1)
    adj = (upper | upper.T).astype(np.float64)

    owned = (np.arange(spec.d)[None, :] % spec.blocks) == labels[:, None]
    if spec.feature_kind == "binary":
        hi = min(1.0, spec.base_rate * (1 + spec.signal))
        lo = max(0.0, spec.base_rate * (1 - spec.signal))
        rate = np.where(owned, hi, lo)
        features = (rng.random((n, spec.d)) < rate).astype(np.float64)
    else:
        features = rng.standard_normal((n, spec.d)) + spec.signal * owned
    train, test = split_masks(n, int(rng.integers(2**63 - 1)))
    return Graph(features, adj, labels, train, test, spec.feature_kind)


# ---------------------------------------------------------------- adjacency transforms


def normalize_adjacency(adj) -> np.ndarray:
    """Symmetric normalization with self-loops, ``D^-1/2 (A + I) D^-1/2``."""
    a = np.asarray(adj, dtype=np.float64) + np.eye(len(adj))
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    out = dinv[:, None] * a * dinv[None, :]
    # the product above is symmetric up to rounding order; force exact symmetry
    return np.triu(out) + np.triu(out, 1).T


def scaled_laplacian(adj) -> np.ndarray:
    """``2 L / lambda_max - I`` with ``lambda_max = 2``, i.e. ``-D^-1/2 A D^-1/2``."""
    a = np.asarray(adj, dtype=np.float64)
    deg = a.sum(axis=1)
    dinv = 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0))
    lap = np.eye(len(a)) - dinv[:, None] * a * dinv[None, :]
    return lap - np.eye(len(a))


def shortest_path_distances(adj, cap: int) -> np.ndarray:
    """BFS hop counts, with unreachable pairs and longer paths clamped to ``cap``."""
    if cap < 1:
        raise ConfigError("cap must be >= 1")
    a = np.asarray(adj)
    n = len(a)
    nbrs = [np.flatnonzero(a[i]) for i in range(n)]
    dist = np.full((n, n), cap, dtype=np.int64)
    for s in range(n):
        dist[s, s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            du = dist[s, u]
            if du + 1 >= cap:
                continue
            for w in nbrs[u]:
                if dist[s, w] == cap and w != s:
                    dist[s, w] = du + 1
                    queue.append(w)
    return dist
