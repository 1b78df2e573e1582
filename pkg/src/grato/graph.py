"""Graph container, JSON I/O, stochastic-block-model generator and split handling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
import numpy as np

from .autodiff import EdgeWeights


class GraphLoadError(ValueError):
    """A graph document failed validation."""


class ConfigError(ValueError):
    """Invalid configuration values."""


@dataclass(frozen=True, eq=False)
class SparseAdj:
    """Directed edge list with binary weights over a fixed sparsity pattern.

    ``pair`` maps each directed edge to its undirected pair id so both
    directions can be dropped together. Self-loops are never stored.
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    pair: np.ndarray
    symmetric: bool = True

    @classmethod
    def from_edges(cls, num_nodes: int, edges, symmetrize: bool = True) -> "SparseAdj":
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise GraphLoadError(f"edge index out of range [0, {num_nodes})")
        e = e[e[:, 0] != e[:, 1]]
        if symmetrize:
            e = np.concatenate([e, e[:, ::-1]])
        e = np.unique(e, axis=0) if e.size else e.reshape(0, 2)
        src, dst = e[:, 0].copy(), e[:, 1].copy()
        lo, hi = np.minimum(src, dst), np.maximum(src, dst)
        _, pair = np.unique(lo * num_nodes + hi, return_inverse=True)
        return cls(num_nodes, src, dst, np.ones(len(src)), pair.astype(np.int64).reshape(-1), symmetrize)

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    @property
    def num_pairs(self) -> int:
        return int(self.pair.max()) + 1 if self.pair.size else 0

    def with_weight(self, weight: np.ndarray) -> "SparseAdj":
        return SparseAdj(self.num_nodes, self.src, self.dst, weight, self.pair, self.symmetric)

    def active(self) -> tuple[np.ndarray, np.ndarray]:
        keep = self.weight != 0
        return self.src[keep], self.dst[keep]

    def degree(self) -> np.ndarray:
        """Weighted in-degree, excluding self-loops."""
        return np.bincount(self.dst, weights=self.weight, minlength=self.num_nodes)

    def aggregation(self) -> EdgeWeights:
        """Row ``i`` of the product sums ``w_ij * x_j`` over neighbors ``j``."""
        return EdgeWeights(self.dst, self.src, self.weight, self.num_nodes)

    def gcn_normalized(self) -> EdgeWeights:
        """Symmetric normalization of A + I."""
        return self._gcn_normalized

    @cached_property
    def _gcn_normalized(self) -> EdgeWeights:
        deg = self.degree() + 1.0
        inv = 1.0 / np.sqrt(deg)
        n = self.num_nodes
        loops = np.arange(n, dtype=np.int64)
        rows = np.concatenate([self.dst, loops])
        cols = np.concatenate([self.src, loops])
        w = np.concatenate([self.weight * inv[self.dst] * inv[self.src], inv * inv])
        return EdgeWeights(rows, cols, w, n)

    def closed_neighborhood(self) -> tuple[np.ndarray, np.ndarray]:
        """(target, source) pairs over active edges plus one self-loop per node."""
        return self._closed_neighborhood

    @cached_property
    def _closed_neighborhood(self) -> tuple[np.ndarray, np.ndarray]:
        src, dst = self.active()
        loops = np.arange(self.num_nodes, dtype=np.int64)
        return np.concatenate([dst, loops]), np.concatenate([src, loops])

    def dense(self) -> np.ndarray:
        m = np.zeros((self.num_nodes, self.num_nodes))
        m[self.dst, self.src] = self.weight
        return m

    def directed_pairs(self) -> list[list[int]]:
        return [[int(s), int(d)] for s, d in zip(self.src, self.dst)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseAdj):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.weight, other.weight)
        )


@dataclass(frozen=True, eq=False)
class Graph:
    features: np.ndarray
    labels: np.ndarray
    adj: SparseAdj
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int

    def __post_init__(self):
        validate(self)

    @property
    def num_nodes(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def mask(self, split: str) -> np.ndarray:
        return {"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}[split]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and self.adj == other.adj
            and all(np.array_equal(self.mask(s), other.mask(s)) for s in ("train", "val", "test"))
        )


def validate(g: Graph) -> None:
    n = g.features.shape[0]
    if g.features.ndim != 2:
        raise GraphLoadError("features must be a 2-D matrix")
    if g.labels.shape != (n,):
        raise GraphLoadError(f"labels: expected {n} entries, got {g.labels.shape[0]}")
    if g.num_classes < 1:
        raise GraphLoadError("num_classes must be >= 1")
    if n and (g.labels.min() < 0 or g.labels.max() >= g.num_classes):
        raise GraphLoadError(f"labels: value out of range [0, {g.num_classes})")
    if g.adj.num_nodes != n:
        raise GraphLoadError(f"adjacency has {g.adj.num_nodes} nodes, features have {n} rows")
    masks = {s: g.mask(s) for s in ("train", "val", "test")}
    for name, m in masks.items():
        if m.dtype != bool or m.shape != (n,):
            raise GraphLoadError(f"{name}_mask must be a boolean vector of length {n}")
    # val/test may be empty (a graph used only for fitting); searching needs both
    if not masks["train"].any():
        raise GraphLoadError("train_mask selects no nodes")
    if (masks["train"] & masks["val"]).any() or (masks["train"] & masks["test"]).any() or (
        masks["val"] & masks["test"]
    ).any():
        raise GraphLoadError("masks not disjoint")
    missing = set(np.unique(g.labels).tolist()) - set(np.unique(g.labels[masks["train"]]).tolist())
    if missing:
        raise GraphLoadError(f"classes {sorted(missing)} have no training node")
    if g.adj.symmetric:
        fwd = set(zip(g.adj.src.tolist(), g.adj.dst.tolist()))
        if any((d, s) not in fwd for s, d in fwd):
            raise GraphLoadError("adjacency flagged symmetric but is not")


def require_splits(g: Graph, *splits: str) -> None:
    for s in splits:
        if not g.mask(s).any():
            raise ConfigError(f"{s}_mask selects no nodes")


def _index_mask(idx, n: int, name: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise GraphLoadError(f"{name}: node index out of range [0, {n})")
    if len(np.unique(idx)) != idx.size:
        raise GraphLoadError(f"{name}: duplicate node index")
    m = np.zeros(n, dtype=bool)
    m[idx] = True
    return m


_REQUIRED = {
    "num_nodes": int,
    "feature_dim": int,
    "num_classes": int,
    "features": list,
    "labels": list,
    "edges": list,
    "undirected": bool,
    "train_mask": list,
    "val_mask": list,
    "test_mask": list,
}


def graph_from_dict(doc: dict) -> Graph:
    if not isinstance(doc, dict):
        raise GraphLoadError("top level must be an object")
    for key, typ in _REQUIRED.items():
        if key not in doc:
            raise GraphLoadError(f"field '{key}': missing")
        if not isinstance(doc[key], typ) or (typ is int and isinstance(doc[key], bool)):
            raise GraphLoadError(f"field '{key}': expected {typ.__name__}")
    n = doc["num_nodes"]
    try:
        feats = np.asarray(doc["features"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise GraphLoadError(f"field 'features': {exc}") from None
    if feats.shape != (n, doc["feature_dim"]):
        raise GraphLoadError(f"field 'features': expected shape ({n}, {doc['feature_dim']}), got {feats.shape}")
    labels = np.asarray(doc["labels"], dtype=np.int64)
    for i, e in enumerate(doc["edges"]):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e)):
            raise GraphLoadError(f"field 'edges': entry {i} is not an [int, int] pair")
        if not (0 <= e[0] < n and 0 <= e[1] < n):
            raise GraphLoadError(f"field 'edges': entry {i} index out of range [0, {n})")
    adj = SparseAdj.from_edges(n, doc["edges"], symmetrize=doc["undirected"])
    masks = {s: _index_mask(doc[f"{s}_mask"], n, f"{s}_mask") for s in ("train", "val", "test")}
    return Graph(feats, labels, adj, masks["train"], masks["val"], masks["test"], doc["num_classes"])


def graph_to_dict(g: Graph) -> dict:
    return {
        "num_nodes": g.num_nodes,
        "feature_dim": g.feature_dim,
        "num_classes": g.num_classes,
        "features": g.features.tolist(),
        "labels": g.labels.tolist(),
        "edges": g.adj.directed_pairs(),
        "undirected": g.adj.symmetric,
        "train_mask": np.flatnonzero(g.train_mask).tolist(),
        "val_mask": np.flatnonzero(g.val_mask).tolist(),
        "test_mask": np.flatnonzero(g.test_mask).tolist(),
    }


def load_graph(path) -> Graph:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise GraphLoadError(f"{path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphLoadError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    try:
        return graph_from_dict(doc)
    except GraphLoadError as exc:
        raise GraphLoadError(f"{path}: {exc}") from None


def save_graph(g: Graph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(g)))


@dataclass(frozen=True)
class SbmConfig:
    communities: int = 3
    nodes_per_community: int = 100
    p_intra: float = 0.1
    p_inter: float = 0.01
    feature_dim: int = 16
    feature_signal: float = 1.0
    seed: int = 0
    train_per_class: int = 20
    val_per_class: int = 50

    def validate(self) -> None:
        if not 0.0 <= self.p_inter <= self.p_intra <= 1.0:
            raise ConfigError("need 0 <= p_inter <= p_intra <= 1")
        if self.communities < 1 or self.feature_dim < 1:
            raise ConfigError("communities and feature_dim must be >= 1")
        if self.nodes_per_community < self.train_per_class + self.val_per_class + 1:
            raise ConfigError(
                f"nodes_per_community={self.nodes_per_community} cannot fill "
                f"{self.train_per_class} train + {self.val_per_class} val + 1 test per class"
            )


def generate_sbm(cfg: SbmConfig) -> Graph:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    c, k = cfg.communities, cfg.nodes_per_community
    n = c * k
    labels = np.repeat(np.arange(c), k)
    iu, ju = np.triu_indices(n, k=1)
    p = np.where(labels[iu] == labels[ju], cfg.p_intra, cfg.p_inter)
    hit = rng.random(iu.size) < p
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    means = np.zeros((c, cfg.feature_dim))
    means[np.arange(c), np.arange(c) % cfg.feature_dim] = cfg.feature_signal
    features = means[labels] + rng.standard_normal((n, cfg.feature_dim))
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    for cls in range(c):
        members = rng.permutation(np.flatnonzero(labels == cls))
        train[members[: cfg.train_per_class]] = True
        val[members[cfg.train_per_class : cfg.train_per_class + cfg.val_per_class]] = True
    test = ~(train | val)
    adj = SparseAdj.from_edges(n, edges, symmetrize=True)
    return Graph(features, labels, adj, train, val, test, c)


def row_normalize_features(g: Graph) -> Graph:
    sums = g.features.sum(axis=1, keepdims=True)
    safe = np.where(sums != 0, sums, 1.0)
    feats = np.where(sums != 0, g.features / safe, g.features)
    return Graph(feats, g.labels, g.adj, g.train_mask, g.val_mask, g.test_mask, g.num_classes)
