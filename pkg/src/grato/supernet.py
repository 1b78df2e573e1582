"""Block DAG with mixed operations, residual block stacking, and architecture derivation.

Node numbering inside a block: 0 is the direct input, 1 the residual input,
``2 .. n+1`` are intermediate nodes and ``n+2`` is the output node.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .graph import Graph, SparseAdj
from .ops import DEFAULT_HYPER, EVAL, OP_KINDS, PROPAGATION_KINDS, OpMode, SearchOp, glorot, stable_uid

log = logging.getLogger(__name__)

State = tuple[Tensor, SparseAdj]


@dataclass(frozen=True)
class BlockSpec:
    n_intermediate: int = 4
    top_k: int = 2
    op_kinds: tuple[str, ...] = OP_KINDS

    def __post_init__(self):
        if self.n_intermediate < 1:
            raise ValueError("n_intermediate must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        unknown = set(self.op_kinds) - set(OP_KINDS)
        if unknown or not self.op_kinds:
            raise ValueError(f"bad op menu: {sorted(unknown) or 'empty'}")

    @property
    def total_nodes(self) -> int:
        return self.n_intermediate + 3

    @property
    def intermediate(self) -> range:
        return range(2, self.n_intermediate + 2)

    def dag_edges(self) -> list[tuple[int, int]]:
        return [(i, j) for j in self.intermediate for i in range(j)]


@dataclass(frozen=True)
class Keep:
    src: int
    op: str
    hyper: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"from": self.src, "op": self.op, "hyper": dict(self.hyper)}


@dataclass(frozen=True)
class DerivedArch:
    n_intermediate: int
    top_k: int
    blocks: int
    hidden_dim: int
    nodes: tuple[tuple[Keep, ...], ...]

    def __post_init__(self):
        if len(self.nodes) != self.n_intermediate:
            raise ValueError(f"expected {self.n_intermediate} intermediate nodes, got {len(self.nodes)}")
        for j, keep in zip(range(2, self.n_intermediate + 2), self.nodes):
            if not keep:
                raise ValueError(f"node {j} keeps no operation")
            for k in keep:
                if not 0 <= k.src < j:
                    raise ValueError(f"node {j}: predecessor {k.src} is not earlier in the block")
                if k.op not in OP_KINDS:
                    raise ValueError(f"node {j}: unknown operation {k.op!r}")

    def entries(self):
        """Yield ``(j, keep)`` in topological order."""
        for j, keep in zip(range(2, self.n_intermediate + 2), self.nodes):
            for k in keep:
                yield j, k

    def to_dict(self) -> dict:
        return {
            "n_intermediate": self.n_intermediate,
            "top_k": self.top_k,
            "blocks": self.blocks,
            "hidden_dim": self.hidden_dim,
            "nodes": [
                {"node": j, "keep": [k.to_json() for k in keep]}
                for j, keep in zip(range(2, self.n_intermediate + 2), self.nodes)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "DerivedArch":
        try:
            n = int(doc["n_intermediate"])
            by_node = {int(entry["node"]): entry["keep"] for entry in doc["nodes"]}
            nodes = tuple(
                tuple(Keep(int(k["from"]), str(k["op"]), dict(k.get("hyper", {}))) for k in by_node[j])
                for j in range(2, n + 2)
            )
            return cls(n, int(doc["top_k"]), int(doc["blocks"]), int(doc["hidden_dim"]), nodes)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed architecture document: missing or bad field {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "DerivedArch":
        return cls.from_dict(json.loads(text))

    def with_blocks(self, blocks: int) -> "DerivedArch":
        return DerivedArch(self.n_intermediate, self.top_k, blocks, self.hidden_dim, self.nodes)

    def longest_subchain(self) -> int:
        """Longest path through the block counting propagation operations."""
        depth = {0: 0, 1: 0}
        for j, keep in zip(range(2, self.n_intermediate + 2), self.nodes):
            depth[j] = max(depth[k.src] + (k.op in PROPAGATION_KINDS) for k in keep)
        return max(depth[j] for j in range(2, self.n_intermediate + 2))

    def effective_depth(self) -> int:
        return self.blocks * self.longest_subchain()


# ---------------------------------------------------------------- building blocks


def mix_alpha(lam: Tensor) -> Tensor:
    return ad.softmax_rows(lam)


def mixed_edge_forward(x: Tensor, a: SparseAdj, lam: Tensor, ops: Sequence[SearchOp], mode: OpMode = EVAL) -> State:
    """Softmax(lam)-weighted sum of op outputs; adjacency outputs multiplied together."""
    if not ops:
        raise ValueError("mixed edge needs at least one operation")
    if lam.shape != (1, len(ops)):
        raise ShapeError(f"lam has shape {lam.shape}, expected (1, {len(ops)})")
    alpha = mix_alpha(lam)
    terms = []
    weight = np.ones_like(a.weight)
    for k, op in enumerate(ops):
        xk, ak = op(x, a, mode)
        terms.append(ad.mul(xk, ad.pick(alpha, [0], [k])))
        if ak is not a:
            weight = weight * ak.weight
    return ad.add_n(terms), a.with_weight(weight)


AGGREGATIONS = ("sum", "mean")


def _reduce(terms: Sequence[Tensor], aggregation: str) -> Tensor:
    total = ad.add_n(terms)
    return ad.scale(total, 1.0 / len(terms)) if aggregation == "mean" and len(terms) > 1 else total


def node_aggregate(incoming: Sequence[State], aggregation: str = "sum") -> State:
    """Sum (or average) the incoming features then ReLU; multiply the incoming adjacencies."""
    if not incoming:
        raise ValueError("node needs at least one predecessor")
    x = ad.relu(_reduce([xi for xi, _ in incoming], aggregation))
    weight = incoming[0][1].weight
    for _, ai in incoming[1:]:
        weight = weight * ai.weight
    return x, incoming[0][1].with_weight(weight)


def combine_outputs(states: Sequence[State], aggregation: str = "sum") -> State:
    x = _reduce([s[0] for s in states], aggregation)
    weight = states[0][1].weight
    for _, a in states[1:]:
        weight = weight * a.weight
    return x, states[0][1].with_weight(weight)


# ---------------------------------------------------------------- the network


class Network:
    """Encoder, ``blocks`` residual blocks, and a one-layer classifier.

    Without ``arch`` every DAG edge carries the full op menu mixed by the
    shared architecture parameters (the supernet). With ``arch`` only the
    retained operations exist and they are summed unweighted.

    ``aggregation="mean"`` averages instead of summing at intermediate nodes
    and at the block output, which keeps activations bounded in deep stacks.
    """

    def __init__(
        self,
        in_dim: int,
        num_classes: int,
        spec: BlockSpec = BlockSpec(),
        blocks: int = 2,
        hidden_dim: int = 256,
        rng: Optional[np.random.Generator] = None,
        arch: Optional[DerivedArch] = None,
        op_hyper: Optional[dict] = None,
        arch_rng: Optional[np.random.Generator] = None,
        aggregation: str = "sum",
    ):
        if blocks < 1:
            raise ValueError("blocks must be >= 1")
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        self.aggregation = aggregation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.spec = spec
        self.blocks = blocks
        self.hidden_dim = hidden_dim
        self.arch = arch
        self.op_hyper = {k: {**DEFAULT_HYPER[k], **(op_hyper or {}).get(k, {})} for k in OP_KINDS}
        if arch is not None:
            if arch.n_intermediate != spec.n_intermediate:
                spec = BlockSpec(arch.n_intermediate, arch.top_k, spec.op_kinds)
                self.spec = spec
        self.encoder = Tensor(glorot(rng, in_dim, hidden_dim), requires_grad=True, name="encoder")
        self.ops: dict[tuple[int, int, int, str], SearchOp] = {}
        for b in range(blocks):
            if arch is None:
                for i, j in spec.dag_edges():
                    for kind in spec.op_kinds:
                        self._make_op(b, i, j, kind, self.op_hyper[kind], rng)
            else:
                for j, k in arch.entries():
                    self._make_op(b, k.src, j, k.op, {**self.op_hyper[k.op], **k.hyper}, rng)
        self.classifier = Tensor(glorot(rng, hidden_dim, num_classes), requires_grad=True, name="classifier")
        self.lam: dict[tuple[int, int], Tensor] = {}
        if arch is None:
            arng = arch_rng if arch_rng is not None else np.random.default_rng(1)
            for i, j in spec.dag_edges():
                self.lam[(i, j)] = Tensor(1e-3 * arng.standard_normal((1, len(spec.op_kinds))), requires_grad=True, name=f"lam{i}{j}")

    def _make_op(self, b, i, j, kind, hyper, rng):
        self.ops[(b, i, j, kind)] = SearchOp(kind, self.hidden_dim, rng, uid=stable_uid(b, i, j, kind), hyper=hyper)

    # -- parameter views
    def weights(self) -> list[Tensor]:
        out = [self.encoder]
        for key in sorted(self.ops):
            op = self.ops[key]
            out.extend(op.params[n] for n in sorted(op.params))
        out.append(self.classifier)
        return out

    def arch_params(self) -> list[Tensor]:
        return [self.lam[e] for e in sorted(self.lam)]

    def zero_grad(self) -> None:
        for t in self.weights() + self.arch_params():
            t.zero_grad()

    @property
    def is_supernet(self) -> bool:
        return self.arch is None

    def alphas(self) -> dict[tuple[int, int], np.ndarray]:
        out = {}
        for e, lam in self.lam.items():
            z = lam.data[0] - lam.data[0].max()
            w = np.exp(z)
            out[e] = w / w.sum()
        return out

    # -- forward
    def block_forward(self, b: int, direct: State, residual: State, mode: OpMode, restrict: Optional[DerivedArch] = None) -> State:
        states: dict[int, State] = {0: direct, 1: residual}
        spec = self.spec
        arch = restrict if restrict is not None else self.arch
        if arch is None:
            for j in spec.intermediate:
                incoming = []
                for i in range(j):
                    ops = [self.ops[(b, i, j, kind)] for kind in spec.op_kinds]
                    incoming.append(mixed_edge_forward(*states[i], self.lam[(i, j)], ops, mode))
                states[j] = node_aggregate(incoming, self.aggregation)
        else:
            for j, keep in zip(spec.intermediate, arch.nodes):
                incoming = [self.ops[(b, k.src, j, k.op)](*states[k.src], mode) for k in keep]
                states[j] = node_aggregate(incoming, self.aggregation)
        return combine_outputs([states[j] for j in spec.intermediate], self.aggregation)

    def forward(self, g: Graph, mode: OpMode = EVAL, restrict: Optional[DerivedArch] = None):
        """Return ``(Y, X_tilde, logits)``; ``restrict`` evaluates only the listed supernet ops."""
        if g.feature_dim != self.in_dim:
            raise ShapeError(f"graph has feature_dim {g.feature_dim}, network expects {self.in_dim}")
        if restrict is not None and self.arch is not None:
            raise ValueError("restrict only applies to a supernet")
        x0 = ad.matmul(Tensor(g.features), self.encoder)
        enc: State = (x0, g.adj)
        history = [enc, enc]
        for b in range(self.blocks):
            out = self.block_forward(b, history[-1], history[-2], mode, restrict)
            history.append(out)
        x_tilde = history[-1][0]
        logits = ad.matmul(x_tilde, self.classifier)
        return ad.softmax_rows(logits), x_tilde, logits

    # -- persistence
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"encoder": self.encoder.data, "classifier": self.classifier.data}
        for (b, i, j, kind), op in self.ops.items():
            for name, t in op.params.items():
                out[f"op/{b}/{i}/{j}/{kind}/{name}"] = t.data
        for (i, j), t in self.lam.items():
            out[f"lam/{i}/{j}"] = t.data
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(own) != set(state):
            raise ValueError("state keys do not match network structure")
        for key, value in state.items():
            if own[key].shape != np.shape(value):
                raise ValueError(f"{key}: shape {np.shape(value)} != {own[key].shape}")
        self.encoder.data = np.array(state["encoder"], dtype=np.float64)
        self.classifier.data = np.array(state["classifier"], dtype=np.float64)
        for (b, i, j, kind), op in self.ops.items():
            for name, t in op.params.items():
                t.data = np.array(state[f"op/{b}/{i}/{j}/{kind}/{name}"], dtype=np.float64)
        for (i, j), t in self.lam.items():
            t.data = np.array(state[f"lam/{i}/{j}"], dtype=np.float64)


def model_forward(g: Graph, net: Network, mode: OpMode = EVAL):
    y, x_tilde, _ = net.forward(g, mode)
    return y, x_tilde


def derive_architecture(
    lam: dict[tuple[int, int], np.ndarray | Tensor],
    spec: BlockSpec = BlockSpec(),
    blocks: int = 1,
    hidden_dim: int = 256,
    op_hyper: Optional[dict] = None,
) -> DerivedArch:
    """Keep, per intermediate node, the ``top_k`` strongest (predecessor, op) pairs by softmax weight."""
    hyper = {k: {**DEFAULT_HYPER[k], **(op_hyper or {}).get(k, {})} for k in OP_KINDS}
    nodes = []
    for j in spec.intermediate:
        cands = []
        for i in range(j):
            v = lam[(i, j)]
            v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64).reshape(-1)
            w = np.exp(v - v.max())
            alpha = w / w.sum()
            cands.extend((-alpha[k], i, k) for k in range(len(spec.op_kinds)))
        if len(cands) < spec.top_k:
            log.warning("node %d has %d candidates < top_k=%d; keeping all", j, len(cands), spec.top_k)
        chosen = sorted(cands)[: spec.top_k]
        nodes.append(tuple(Keep(i, spec.op_kinds[k], dict(hyper[spec.op_kinds[k]])) for _, i, k in chosen))
    return DerivedArch(spec.n_intermediate, spec.top_k, blocks, hidden_dim, tuple(nodes))


def build_discrete_model(
    arch: DerivedArch,
    in_dim: int,
    num_classes: int,
    rng: Optional[np.random.Generator] = None,
    op_hyper=None,
    aggregation: str = "sum",
) -> Network:
    spec = BlockSpec(arch.n_intermediate, arch.top_k)
    return Network(
        in_dim, num_classes, spec, arch.blocks, arch.hidden_dim, rng=rng, arch=arch, op_hyper=op_hyper, aggregation=aggregation
    )
