"""The candidate operations. Each maps ``(x, adj) -> (x', adj')`` at a fixed width."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .graph import ConfigError, SparseAdj

OP_KINDS = (
    "gcn",
    "gat",
    "sage",
    "sgc",
    "agnn",
    "pairnorm",
    "dropedge",
    "dropattr_r",
    "dropattr_c",
    "dropattr_e",
)

# ops that propagate over the graph; they count toward layer depth
PROPAGATION_KINDS = frozenset({"gcn", "gat", "sage", "sgc", "agnn"})
STOCHASTIC_KINDS = frozenset({"dropedge", "dropattr_r", "dropattr_c", "dropattr_e"})

DEFAULT_HYPER = {
    "gcn": {},
    "gat": {"slope": 0.2},
    "sage": {},
    "sgc": {"K": 2},
    "agnn": {},
    "pairnorm": {"s": 1.0},
    "dropedge": {"p": 0.3},
    "dropattr_r": {"rate": 0.1},
    "dropattr_c": {"rate": 0.1},
    "dropattr_e": {"p": 0.6},
}


@dataclass(frozen=True)
class OpMode:
    """Train/eval switch plus the seed of the current step's mask stream.

    Masks are a pure function of ``(seed, op uid)``, so re-running a forward
    pass with the same mode reproduces the same masks.
    """

    training: bool = False
    seed: int = 0

    def rng(self, uid: int) -> np.random.Generator:
        return np.random.default_rng([self.seed & 0xFFFFFFFF, uid & 0xFFFFFFFF])


EVAL = OpMode(training=False)

# all DropEdge ops of a step draw from this one stream
DROPEDGE_STREAM = 0x0D20E


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# ---------------------------------------------------------------- functional forms


def gcn_forward(x: Tensor, adj: SparseAdj, theta: Tensor) -> Tensor:
    return ad.matmul(ad.spmm(adj.gcn_normalized(), x), theta)


def sgc_forward(x: Tensor, adj: SparseAdj, theta: Tensor, K: int = 2) -> Tensor:
    if K < 1:
        raise ConfigError("sgc: K must be >= 1")
    prop = adj.gcn_normalized()
    h = x
    for _ in range(K):
        h = ad.spmm(prop, h)
    return ad.matmul(h, theta)


def gat_forward(x: Tensor, adj: SparseAdj, theta: Tensor, a_dst: Tensor, a_src: Tensor, slope: float = 0.2) -> Tensor:
    h = ad.matmul(x, theta)
    tgt, src = adj.closed_neighborhood()
    score = ad.add(ad.gather_rows(ad.matmul(h, a_dst), tgt), ad.gather_rows(ad.matmul(h, a_src), src))
    alpha = ad.segment_softmax(ad.leaky_relu(score, slope), tgt, adj.num_nodes)
    return ad.edge_aggregate(alpha, h, tgt, src, adj.num_nodes)


def gat_attention(x: Tensor, adj: SparseAdj, theta: Tensor, a_dst: Tensor, a_src: Tensor, slope: float = 0.2):
    """Attention weights and their (target, source) index, for inspection."""
    h = x.data @ theta.data
    tgt, src = adj.closed_neighborhood()
    score = (h @ a_dst.data)[tgt, 0] + (h @ a_src.data)[src, 0]
    score = np.where(score > 0, score, slope * score)
    return kernels.segment_softmax(score, tgt, adj.num_nodes), tgt, src


def sage_forward(x: Tensor, adj: SparseAdj, w_self: Tensor, w_neigh: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w_self), ad.matmul(ad.spmm(adj.aggregation(), x), w_neigh))


def agnn_propagation(x: Tensor, adj: SparseAdj, beta: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    tgt, src = adj.closed_neighborhood()
    unit = ad.normalize_rows(x)
    cos = ad.edge_dot(unit, unit, tgt, src)
    return ad.segment_softmax(ad.mul(cos, beta), tgt, adj.num_nodes), tgt, src


def agnn_forward(x: Tensor, adj: SparseAdj, beta: Tensor) -> Tensor:
    p, tgt, src = agnn_propagation(x, adj, beta)
    return ad.edge_aggregate(p, x, tgt, src, adj.num_nodes)


def pairnorm_forward(x: Tensor, s: float = 1.0) -> Tensor:
    if x.shape[0] < 1:
        raise ValueError("pairnorm needs at least one node")
    return ad.pairnorm(x, s)


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"drop rate must lie in [0, 1), got {rate}")


def dropedge_forward(adj: SparseAdj, p: float, mode: OpMode, rng: Optional[np.random.Generator] = None) -> SparseAdj:
    """Zero ``floor(p * V)`` of the ``V`` edges of the adjacency pattern (undirected pairs together).

    Pairs are ranked by a per-step random priority and the lowest-ranked are
    dropped, so every DropEdge call within one step removes a nested subset of
    the same pairs: multiplying their outputs never compounds the drop rate.
    """
    _check_rate(p)
    if not mode.training or p == 0.0:
        return adj
    rng = rng if rng is not None else mode.rng(DROPEDGE_STREAM)
    unit = adj.pair if adj.symmetric else np.arange(adj.num_edges)
    n_units = adj.num_pairs if adj.symmetric else adj.num_edges
    priority = rng.permutation(n_units)
    kill = priority[unit] < int(np.floor(p * n_units))
    return adj.with_weight(np.where(kill, 0.0, adj.weight))


def dropattr_mask(shape, kind: str, rate: float, rng: np.random.Generator, values: Optional[np.ndarray] = None) -> np.ndarray:
    _check_rate(rate)
    n, f = shape
    mask = np.ones(shape)
    if kind == "dropattr_r":
        mask[rng.choice(n, size=int(np.floor(rate * n)), replace=False), :] = 0.0
    elif kind == "dropattr_c":
        mask[:, rng.choice(f, size=int(np.floor(rate * f)), replace=False)] = 0.0
    elif kind == "dropattr_e":
        nz = np.flatnonzero(values != 0) if values is not None else np.arange(n * f)
        hit = rng.choice(nz, size=int(np.floor(rate * nz.size)), replace=False)
        mask.reshape(-1)[hit] = 0.0
    else:
        raise ValueError(f"unknown drop-attribute kind {kind!r}")
    return mask


def dropattr_forward(x: Tensor, kind: str, rate: float, mode: OpMode, rng: Optional[np.random.Generator] = None) -> Tensor:
    _check_rate(rate)
    if not mode.training or rate == 0.0:
        return x
    rng = rng or mode.rng(0)
    return ad.mask_apply(x, dropattr_mask(x.shape, kind, rate, rng, x.data))


def dropattr_r_forward(x, rate, mode, rng=None):
    return dropattr_forward(x, "dropattr_r", rate, mode, rng)


def dropattr_c_forward(x, rate, mode, rng=None):
    return dropattr_forward(x, "dropattr_c", rate, mode, rng)


def dropattr_e_forward(x, p, mode, rng=None):
    return dropattr_forward(x, "dropattr_e", p, mode, rng)


# ---------------------------------------------------------------- op objects


class SearchOp:
    """One candidate operation with its own weights and fixed hyperparameters."""

    def __init__(self, kind: str, dim: int, rng: np.random.Generator, uid: int = 0, hyper: Optional[dict] = None):
        if kind not in OP_KINDS:
            raise ValueError(f"unknown operation {kind!r}")
        self.kind = kind
        self.dim = dim
        self.uid = uid
        self.hyper = {**DEFAULT_HYPER[kind], **(hyper or {})}
        if kind == "sgc" and int(self.hyper["K"]) < 1:
            raise ConfigError("sgc: K must be >= 1")
        for key in ("p", "rate"):
            if key in self.hyper:
                _check_rate(float(self.hyper[key]))
        self.params: dict[str, Tensor] = {}
        if kind in ("gcn", "sgc"):
            self._param("theta", glorot(rng, dim, dim))
        elif kind == "gat":
            self._param("theta", glorot(rng, dim, dim))
            a = glorot(rng, 2 * dim, 1)
            self._param("a_dst", a[:dim])
            self._param("a_src", a[dim:])
        elif kind == "sage":
            self._param("w_self", glorot(rng, dim, dim))
            self._param("w_neigh", glorot(rng, dim, dim))
        elif kind == "agnn":
            self._param("beta", np.ones((1, 1)))

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=f"{self.kind}.{name}")

    def __call__(self, x: Tensor, adj: SparseAdj, mode: OpMode = EVAL) -> tuple[Tensor, SparseAdj]:
        p, h, k = self.params, self.hyper, self.kind
        if k == "gcn":
            return gcn_forward(x, adj, p["theta"]), adj
        if k == "gat":
            return gat_forward(x, adj, p["theta"], p["a_dst"], p["a_src"], h["slope"]), adj
        if k == "sage":
            return sage_forward(x, adj, p["w_self"], p["w_neigh"]), adj
        if k == "sgc":
            return sgc_forward(x, adj, p["theta"], int(h["K"])), adj
        if k == "agnn":
            return agnn_forward(x, adj, p["beta"]), adj
        if k == "pairnorm":
            return pairnorm_forward(x, h["s"]), adj
        if k == "dropedge":
            return x, dropedge_forward(adj, h["p"], mode)
        rate = h["rate"] if "rate" in h else h["p"]
        return dropattr_forward(x, k, rate, mode, mode.rng(self.uid)), adj

    def __repr__(self) -> str:
        return f"SearchOp({self.kind!r}, dim={self.dim}, hyper={self.hyper})"


def stable_uid(*parts) -> int:
    return zlib.crc32("/".join(map(str, parts)).encode())
