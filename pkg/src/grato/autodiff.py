"""Minimal reverse-mode autodiff over dense float64 matrices.

Every value is a 2-D ``Tensor``; scalars are ``(1, 1)``. Operations build the
graph as they run (define-by-run) and ``backward`` walks it in reverse
topological order. Broadcasting is limited to matrix-with-matrix and
matrix-with-``(1, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphIndexError(IndexError):
    """An edge or row index falls outside the operand."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a (1, 1) tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = ""
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = np.zeros_like(data) if out.requires_grad else None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def _reduce_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.array(g.sum()).reshape(1, 1)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.shape == (1, 1) or a.shape == (1, 1):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


@dataclass
class Tape:
    """Recorded operations reachable from a root, parents before children."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_root(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None:
            node._backward(node.grad)
    # free intermediate buffers; leaves keep their accumulated grads
    for node in tape.nodes:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def fn(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _result(a.data @ b.data, (a, b), fn)


@dataclass(frozen=True)
class EdgeWeights:
    """Constant weighted edge list: output row ``rows[e]`` gathers input row ``cols[e]``."""

    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    num_nodes: int

    def __post_init__(self):
        n = self.num_nodes
        for arr in (self.rows, self.cols):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise GraphIndexError(f"edge index out of range for {n} nodes")

    def transpose(self) -> "EdgeWeights":
        return EdgeWeights(self.cols, self.rows, self.weights, self.num_nodes)

    def dense(self) -> np.ndarray:
        m = np.zeros((self.num_nodes, self.num_nodes))
        np.add.at(m, (self.rows, self.cols), self.weights)
        return m


def spmm(adj: EdgeWeights, x: Tensor) -> Tensor:
    """Sparse-times-dense product with constant adjacency weights."""
    if adj.num_nodes != x.shape[0]:
        raise ShapeError(f"spmm: adjacency has {adj.num_nodes} nodes, features have {x.shape[0]} rows")
    out = kernels.spmm(adj.rows, adj.cols, adj.weights, x.data, adj.num_nodes)

    def fn(g):
        x.grad += kernels.spmm(adj.cols, adj.rows, adj.weights, g, x.shape[0])

    return _result(out, (x,), fn)


def edge_aggregate(w: Tensor, x: Tensor, rows: np.ndarray, cols: np.ndarray, n_out: int) -> Tensor:
    """out[rows[e]] += w[e] * x[cols[e]] with ``w`` an ``(E, 1)`` differentiable edge weight."""
    if w.shape != (rows.size, 1):
        raise ShapeError(f"edge_aggregate: weights {w.shape} for {rows.size} edges")
    if rows.size and (rows.max() >= n_out or cols.max() >= x.shape[0]):
        raise GraphIndexError("edge_aggregate: edge index out of range")
    out = kernels.spmm(rows, cols, w.data[:, 0], x.data, n_out)

    def fn(g):
        if x.requires_grad:
            x.grad += kernels.spmm(cols, rows, w.data[:, 0], g, x.shape[0])
        if w.requires_grad:
            w.grad += kernels.edge_dot(rows, cols, g, x.data)[:, None]

    return _result(out, (w, x), fn)


def edge_dot(a: Tensor, b: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Per-edge inner products ``<a[rows[e]], b[cols[e]]>`` as an ``(E, 1)`` column."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"edge_dot: widths {a.shape[1]} and {b.shape[1]} differ")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = kernels.edge_dot(rows, cols, a.data, b.data)[:, None]

    def fn(g):
        w = g[:, 0]
        if a.requires_grad:
            a.grad += kernels.spmm(rows, cols, w, b.data, a.shape[0])
        if b.requires_grad:
            b.grad += kernels.spmm(cols, rows, w, a.data, b.shape[0])

    return _result(out, (a, b), fn)


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit length; zero rows stay zero with zero gradient."""
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))[:, None]
    safe = np.where(norms > 0, norms, 1.0)
    u = x.data / safe

    def fn(g):
        x.grad += (g - u * np.einsum("ij,ij->i", g, u)[:, None]) / safe

    return _result(u, (x,), fn)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise GraphIndexError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def fn(g):
        x.grad += kernels.spmm(index, np.arange(index.size), np.ones(index.size), g, x.shape[0])

    return _result(x.data[index], (x,), fn)


def pick(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Column vector of the entries ``x[rows[i], cols[i]]``."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def fn(g):
        np.add.at(x.grad, (rows, cols), g[:, 0])

    return _result(x.data[rows, cols][:, None], (x,), fn)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")

    def fn(g):
        if a.requires_grad:
            a.grad += _reduce_to(g, a.shape)
        if b.requires_grad:
            b.grad += _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")

    def fn(g):
        if a.requires_grad:
            a.grad += _reduce_to(g, a.shape)
        if b.requires_grad:
            b.grad -= _reduce_to(g, b.shape)

    return _result(a.data - b.data, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")

    def fn(g):
        if a.requires_grad:
            a.grad += _reduce_to(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def fn(g):
        x.grad += c * g

    return _result(c * x.data, (x,), fn)


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors, one graph node instead of a chain."""
    if not terms:
        raise ValueError("add_n needs at least one term")
    shape = terms[0].shape
    for t in terms:
        if t.shape != shape:
            raise ShapeError(f"add_n: shape {t.shape} differs from {shape}")
    out = terms[0].data.copy()
    for t in terms[1:]:
        out += t.data

    def fn(g):
        for t in terms:
            if t.requires_grad:
                t.grad += g

    return _result(out, tuple(terms), fn)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def fn(g):
        x.grad += g * active

    return _result(np.where(active, x.data, 0.0), (x,), fn)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)

    def fn(g):
        x.grad += g * factor

    return _result(x.data * factor, (x,), fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def fn(g):
        x.grad += g * out

    return _result(out, (x,), fn)


def log(x: Tensor, floor: Optional[float] = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped below and the clamped entries get no gradient."""
    if floor is None:
        clamped = x.data
        live = np.ones_like(x.data, dtype=bool)
    else:
        live = x.data >= floor
        # np.maximum keeps NaN, so a diverged model still yields a non-finite loss
        clamped = np.maximum(x.data, floor)

    def fn(g):
        x.grad += np.where(live, g / clamped, 0.0)

    return _result(np.log(clamped), (x,), fn)


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data

    def fn(g):
        x.grad -= g * out * out

    return _result(out, (x,), fn)


def mask_apply(x: Tensor, mask: np.ndarray) -> Tensor:
    """Element-wise product with a constant mask (no gradient to the mask)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ShapeError(f"mask_apply: mask {mask.shape} vs tensor {x.shape}")

    def fn(g):
        x.grad += g * mask

    return _result(x.data * mask, (x,), fn)


def l2_norm_rows(x: Tensor) -> Tensor:
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))[:, None]
    safe = np.where(norms > 0, norms, 1.0)

    def fn(g):
        x.grad += np.where(norms > 0, g * x.data / safe, 0.0)

    return _result(norms, (x,), fn)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity as an ``(n, 1)`` column; zero-norm rows give 0 with zero gradient."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_rows: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))[:, None]
    nb = np.sqrt(np.einsum("ij,ij->i", b.data, b.data))[:, None]
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = np.einsum("ij,ij->i", a.data, b.data)[:, None]
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)

    def fn(g):
        gg = np.where(ok, g, 0.0)
        if a.requires_grad:
            a.grad += gg * (b.data / (na_s * nb_s) - cos * a.data / (na_s * na_s))
        if b.requires_grad:
            b.grad += gg * (a.data / (na_s * nb_s) - cos * b.data / (nb_s * nb_s))

    return _result(cos, (a, b), fn)


# ---------------------------------------------------------------- reductions & normalizations


def sum_all(x: Tensor) -> Tensor:
    def fn(g):
        x.grad += g[0, 0]

    return _result(np.array([[x.data.sum()]]), (x,), fn)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        x.grad += out * (g - (g * out).sum(axis=1, keepdims=True))

    return _result(out, (x,), fn)


def segment_softmax(scores: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of an ``(E, 1)`` score column within each segment id. Empty segments are skipped."""
    if scores.shape[1] != 1 or scores.shape[0] != len(segments):
        raise ShapeError(f"segment_softmax: scores {scores.shape} for {len(segments)} entries")
    segments = np.asarray(segments, dtype=np.int64)
    out = kernels.segment_softmax(scores.data[:, 0], segments, n_segments)

    def fn(g):
        gv = g[:, 0]
        inner = kernels.segment_sum(gv * out, segments, n_segments)
        scores.grad += (out * (gv - inner[segments]))[:, None]

    return _result(out[:, None], (scores,), fn)


def pairnorm(x: Tensor, s: float = 1.0, eps: float = 0.0) -> Tensor:
    """Center rows on their mean, then rescale so the mean squared row norm is ``s**2``.

    An all-identical input (zero centered matrix) maps to zeros.
    """
    n = x.shape[0]
    centered = x.data - x.data.mean(axis=0, keepdims=True)
    msq = float(np.einsum("ij,ij->", centered, centered)) / n
    if msq <= eps or msq == 0.0:

        def fn_zero(g):
            pass

        return _result(np.zeros_like(x.data), (x,), fn_zero)
    r = np.sqrt(msq)
    out = s * centered / r

    def fn(g):
        # d out / d centered: (s/r) (g - c <c, g> / (n r^2))
        gc = (s / r) * (g - centered * float(np.einsum("ij,ij->", centered, g)) / (n * msq))
        x.grad += gc - gc.mean(axis=0, keepdims=True)

    return _result(out, (x,), fn)


def numeric_grad(f: Callable[[], Tensor], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``t.data`` (perturbed in place)."""
    grad = np.zeros_like(t.data)
    it = np.nditer(t.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = t.data[idx]
        t.data[idx] = orig + step
        fp = f().item()
        t.data[idx] = orig - step
        fm = f().item()
        t.data[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad
