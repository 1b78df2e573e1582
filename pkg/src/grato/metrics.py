"""Accuracy, macro-F1, MAD and MAD^tgt, integrative ranking, and the node-pair probe."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Callable, Mapping, Optional

import numpy as np
from scipy.stats import rankdata

METRIC_KEYS = ("acc", "f1", "mad")


class MetricError(ValueError):
    pass


def _sel(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.arange(n)
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if idx.size == 0:
        raise MetricError("empty mask")
    return idx


def accuracy(pred, y, mask=None) -> float:
    pred, y = np.asarray(pred), np.asarray(y)
    idx = _sel(mask, len(y))
    return float(np.mean(pred[idx] == y[idx]))


def confusion(pred, y, num_classes: int, mask=None) -> np.ndarray:
    pred, y = np.asarray(pred), np.asarray(y)
    idx = _sel(mask, len(y))
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y[idx], pred[idx]), 1)
    return cm


def per_class_precision_recall(pred, y, num_classes: int, mask=None):
    cm = confusion(pred, y, num_classes, mask)
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    return precision, recall


def macro_f1(pred, y, mask=None, num_classes: Optional[int] = None) -> float:
    y = np.asarray(y)
    m = int(num_classes if num_classes is not None else max(np.max(pred), np.max(y)) + 1)
    p, r = per_class_precision_recall(pred, y, m, mask)
    denom = p + r
    f1 = np.divide(2 * p * r, denom, out=np.zeros_like(p), where=denom > 0)
    return float(f1.mean())


def cosine_distance_matrix(x: np.ndarray) -> np.ndarray:
    """1 - cos for every node pair; zero-norm rows have cosine 0 with everything."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    safe = np.where(norms > 0, norms, 1.0)
    unit = x / safe[:, None]
    # rounding can push |cos| a hair past 1
    return np.clip(1.0 - unit @ unit.T, 0.0, 2.0)


def mad(x: np.ndarray, target: Optional[np.ndarray] = None) -> float:
    """Mean average cosine distance, x100.

    ``target`` is an ``(n, n)`` boolean matrix of the pairs each node is
    compared against; default is every other node.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if target is None:
        target = ~np.eye(n, dtype=bool)
    target = np.asarray(target, dtype=bool)
    dist = cosine_distance_matrix(x) * target
    counts = target.sum(axis=1)
    has = counts > 0
    if not has.any():
        raise MetricError("mad: no node has a target partner")
    per_node = dist.sum(axis=1)[has] / counts[has]
    return float(per_node.mean() * 100.0)


def mad_tgt(x: np.ndarray, y: np.ndarray) -> float:
    """Mean over unordered label pairs of the cross-label MAD, x100."""
    y = np.asarray(y)
    labels = np.unique(y)
    if labels.size < 2:
        raise MetricError("mad_tgt: need at least two distinct labels")
    values = []
    for a, b in combinations(labels.tolist(), 2):
        idx = np.flatnonzero((y == a) | (y == b))
        ys = y[idx]
        target = ys[:, None] != ys[None, :]
        values.append(mad(x[idx], target))
    return float(np.mean(values))


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    mad: float
    mad_tgt: Optional[float]
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(pred, y, x_tilde, mask, num_classes: int, mad_mask=None) -> EvalReport:
    """Scores on ``mask``; MAD and MAD^tgt over ``mad_mask`` (all nodes by default)."""
    p, r = per_class_precision_recall(pred, y, num_classes, mask)
    idx = _sel(mad_mask, len(y))
    emb, lab = np.asarray(x_tilde)[idx], np.asarray(y)[idx]
    return EvalReport(
        accuracy=accuracy(pred, y, mask),
        macro_f1=macro_f1(pred, y, mask, num_classes),
        mad=mad(emb),
        mad_tgt=mad_tgt(emb, lab) if np.unique(lab).size > 1 else None,
        precision=p.tolist(),
        recall=r.tolist(),
    )


# ---------------------------------------------------------------- integrative ranking


@dataclass
class RankTable:
    methods: list[str]
    values: dict[str, dict[str, float]]
    ranks: dict[str, dict[str, int]]
    average: dict[str, float]
    position: dict[str, int]

    def rows(self):
        order = sorted(self.methods, key=lambda m: (self.position[m], self.methods.index(m)))
        for m in order:
            yield m

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *METRIC_KEYS, *(f"rank_{k}" for k in METRIC_KEYS), "avg_rank", "rank"])
        for m in self.rows():
            w.writerow(
                [m, *(self.values[m][k] for k in METRIC_KEYS), *(self.ranks[m][k] for k in METRIC_KEYS),
                 f"{self.average[m]:.4f}", self.position[m]]
            )
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["method", "Acc", "F1", "MAD", "avg", "Rank"]
        body = [
            [m, *(f"{self.values[m][k]:g}" for k in METRIC_KEYS), f"{self.average[m]:.2f}", str(self.position[m])]
            for m in self.rows()
        ]
        widths = [max(len(r[c]) for r in [head, *body]) for c in range(len(head))]
        fmt = lambda r: "  ".join(v.ljust(widths[0]) if c == 0 else v.rjust(widths[c]) for c, v in enumerate(r))
        return "\n".join([fmt(head), *(fmt(r) for r in body)])


def integrative_rank(table: Mapping[str, Mapping[str, float]]) -> RankTable:
    """Rank each metric (higher is better, competition ties), average, then rank the averages."""
    methods = list(table)
    if not methods:
        raise MetricError("integrative_rank: no methods")
    for m in methods:
        for k in METRIC_KEYS:
            if k not in table[m] or table[m][k] is None:
                raise MetricError(f"integrative_rank: method {m!r} is missing metric {k!r}")
    ranks = {m: {} for m in methods}
    for k in METRIC_KEYS:
        col = np.array([float(table[m][k]) for m in methods])
        r = rankdata(-col, method="min").astype(int)
        for m, v in zip(methods, r):
            ranks[m][k] = int(v)
    avg = {m: sum(ranks[m].values()) / len(METRIC_KEYS) for m in methods}
    # exact thirds compare reliably after scaling to integer rank sums
    sums = np.array([sum(ranks[m].values()) for m in methods])
    pos = rankdata(sums, method="min").astype(int)
    return RankTable(
        methods=methods,
        values={m: {k: float(table[m][k]) for k in METRIC_KEYS} for m in methods},
        ranks=ranks,
        average=avg,
        position={m: int(p) for m, p in zip(methods, pos)},
    )


# ---------------------------------------------------------------- same-label pair probe


def roc_auc(scores: np.ndarray, truth: np.ndarray) -> float:
    """ROC-AUC via the Mann-Whitney rank statistic (ties get half credit)."""
    truth = np.asarray(truth, dtype=bool)
    n_pos, n_neg = truth.sum(), (~truth).sum()
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc: need both positive and negative examples")
    r = rankdata(scores)
    return float((r[truth].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _logistic_fit(feats, target, epochs: int, lr: float, l2: float, val=None):
    n, d = feats.shape
    w = np.zeros(d)
    b = 0.0
    best = (-np.inf, w.copy(), b)
    for _ in range(epochs):
        z = feats @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        err = p - target
        w -= lr * (feats.T @ err / n + l2 * w)
        b -= lr * err.mean()
        if val is not None:
            vf, vt = val
            auc = roc_auc(vf @ w + b, vt)
            if auc > best[0]:
                best = (auc, w.copy(), b)
    if val is not None:
        return best[1], best[2]
    return w, b


def pair_probe_auc(
    x_tilde: np.ndarray,
    y: np.ndarray,
    split_sizes: tuple[int, int, int] = (7000, 2000, 1000),
    seed: int = 0,
    epochs: int = 300,
    lr: float = 0.5,
    l2: float = 1e-4,
) -> float:
    """Train a logistic classifier on concatenated pair embeddings to predict same-label; return test AUC."""
    x = np.asarray(x_tilde, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    if n < 2:
        raise MetricError("pair_probe_auc: need at least 2 nodes")
    rng = np.random.default_rng(seed)
    total = sum(split_sizes)
    i = rng.integers(0, n, size=total)
    j = rng.integers(0, n - 1, size=total)
    j = j + (j >= i)
    mu, sd = x.mean(axis=0), x.std(axis=0)
    z = (x - mu) / np.where(sd > 0, sd, 1.0)
    feats = np.concatenate([z[i], z[j]], axis=1)
    # symmetric pair interactions let a linear model express "same side of the space"
    feats = np.concatenate([feats, z[i] * z[j]], axis=1)
    truth = (y[i] == y[j]).astype(float)
    a, b = split_sizes[0], split_sizes[0] + split_sizes[1]
    splits = [(feats[:a], truth[:a]), (feats[a:b], truth[a:b]), (feats[b:], truth[b:])]
    for name, (_, t) in zip(("train", "validation", "test"), splits):
        if t.size == 0 or t.min() == t.max():
            raise MetricError(f"pair_probe_auc: {name} split has a single class of pairs")
    w, bias = _logistic_fit(*splits[0], epochs=epochs, lr=lr, l2=l2, val=splits[1])
    return roc_auc(splits[2][0] @ w + bias, splits[2][1])
