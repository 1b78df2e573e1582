"""Bilevel architecture search, Adam, and retraining of a derived architecture."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, require_splits
from .metrics import EvalReport, accuracy, evaluate, mad
from .objective import LossConfig, sample_pairs, total_loss
from .ops import EVAL, OpMode
from .seeding import substream, substream_seed
from .supernet import BlockSpec, DerivedArch, Network, build_discrete_model, derive_architecture

log = logging.getLogger(__name__)

ORDERS = ("first", "second", "paper_literal")
# validation MAD (x100, at most 200) enters the score scaled below any 1e-4 accuracy gap
MAD_TIE_WEIGHT = 1e-7


class DivergenceError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class SearchConfig:
    lr_weights: float = 0.005
    lr_arch: float = 0.005
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epsilon_scale: float = 0.01
    xi: Optional[float] = None
    order: str = "second"
    max_epochs: int = 100
    patience: int = 50
    retrain_epochs: int = 200
    retrain_patience: int = 50
    seed: int = 0
    # weight-only epochs before the first architecture step; 0 runs the plain alternating loop
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.lr_weights <= 0 or self.lr_arch <= 0:
            raise ValueError("learning rates must be > 0")
        if self.epsilon_scale <= 0:
            raise ValueError("epsilon_scale must be > 0")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    @property
    def virtual_step(self) -> float:
        return self.lr_weights if self.xi is None else self.xi


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    wd: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """In-place Adam update; weight decay enters as ``wd * param`` added to the gradient."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        g = g + wd * p.data if wd else g
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, wd: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.wd, self.betas, self.eps = lr, wd, tuple(betas), eps
        self.state = AdamState.for_params(self.params)

    def step(self, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        grads = [p.grad for p in self.params] if grads is None else grads
        adam_step(self.params, grads, self.state, self.lr, self.wd, self.betas, self.eps)


# ---------------------------------------------------------------- architecture gradient


class BilevelProblem(Protocol):
    def weights(self) -> list[Tensor]: ...

    def arch_params(self) -> list[Tensor]: ...

    def train_loss(self) -> Tensor: ...

    def val_loss(self) -> Tensor: ...


def _gradients(problem: BilevelProblem, which: str) -> tuple[list[np.ndarray], list[np.ndarray], float]:
    ws, lams = problem.weights(), problem.arch_params()
    for t in ws + lams:
        t.zero_grad()
    loss = problem.train_loss() if which == "train" else problem.val_loss()
    ad.backward(loss)
    zero = lambda t: t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
    return [zero(t) for t in ws], [zero(t) for t in lams], loss.item()


def _set_weights(ws: Sequence[Tensor], values: Sequence[np.ndarray]) -> None:
    for t, v in zip(ws, values):
        t.data = v


def arch_gradient(problem: BilevelProblem, cfg: SearchConfig) -> list[np.ndarray]:
    """Finite-difference approximation of the one-step unrolled architecture gradient.

    Weights are restored bitwise before returning.
    """
    ws = problem.weights()
    saved = [t.data for t in ws]
    if cfg.order == "first":
        _, g_lam, _ = _gradients(problem, "val")
        return g_lam
    xi = cfg.virtual_step
    try:
        g_w, _, _ = _gradients(problem, "train")
        _set_weights(ws, [w - xi * g for w, g in zip(saved, g_w)])
        g_wv, g_lam, _ = _gradients(problem, "val")
        norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in g_wv)))
        if norm < 1e-12:
            log.debug("validation weight-gradient vanished; using first-order gradient")
            _set_weights(ws, saved)
            _, g_lam, _ = _gradients(problem, "val")
            return g_lam
        eps = cfg.epsilon_scale / norm
        _set_weights(ws, [w + eps * g for w, g in zip(saved, g_wv)])
        _, g_plus, _ = _gradients(problem, "train")
        _set_weights(ws, [w - eps * g for w, g in zip(saved, g_wv)])
        _, g_minus, _ = _gradients(problem, "train")
    finally:
        _set_weights(ws, saved)
    if cfg.order == "paper_literal":
        factor = 0.5
    else:
        factor = xi / (2.0 * eps)
    return [gl - factor * (gp - gm) for gl, gp, gm in zip(g_lam, g_plus, g_minus)]


@dataclass
class NetProblem:
    """Train/validation losses of a network on one graph with masks and pairs frozen."""

    net: Network
    graph: Graph
    loss_cfg: LossConfig
    mode: OpMode
    train_pairs: Optional[np.ndarray] = None
    val_pairs: Optional[np.ndarray] = None

    def weights(self):
        return self.net.weights()

    def arch_params(self):
        return self.net.arch_params()

    def _loss(self, split: str, pairs) -> Tensor:
        y_pred, x_tilde, _ = self.net.forward(self.graph, self.mode)
        return total_loss(y_pred, x_tilde, self.graph.labels, self.graph.mask(split), self.loss_cfg, pairs=pairs)

    def train_loss(self):
        return self._loss("train", self.train_pairs)

    def val_loss(self):
        return self._loss("val", self.val_pairs)


# ---------------------------------------------------------------- search loop


@dataclass
class BlockList:
    """Derived architectures in strictly increasing validation-score order."""

    entries: list[tuple[DerivedArch, float]] = field(default_factory=list)

    def offer(self, arch: DerivedArch, score: float) -> bool:
        if self.entries and score <= self.entries[-1][1]:
            return False
        self.entries.append((arch, score))
        return True

    def best(self) -> Optional[DerivedArch]:
        return self.entries[-1][0] if self.entries else None

    def __len__(self) -> int:
        return len(self.entries)


def validation_score(net: Network, arch: DerivedArch, g: Graph) -> tuple[float, float, float]:
    """Return ``(score, val accuracy, val MAD x100)`` using supernet weights on the derived ops only."""
    y_pred, x_tilde, _ = net.forward(g, EVAL, restrict=arch if net.is_supernet else None)
    pred = y_pred.data.argmax(axis=1)
    acc = accuracy(pred, g.labels, g.val_mask)
    mad_val = mad(x_tilde.data[g.val_mask])
    return combine_score(acc, mad_val), acc, mad_val


def combine_score(acc: float, mad_x100: float) -> float:
    return acc + MAD_TIE_WEIGHT * mad_x100


def _finite(value: float) -> bool:
    return bool(np.isfinite(value))


@dataclass
class SearchResult:
    blocklist: BlockList
    net: Network
    history: list[dict]


def build_supernet(
    g: Graph, spec: BlockSpec, blocks: int, hidden_dim: int, seed: int, op_hyper=None, aggregation: str = "sum"
) -> Network:
    return Network(
        g.feature_dim,
        g.num_classes,
        spec,
        blocks,
        hidden_dim,
        rng=substream(seed, "weights"),
        op_hyper=op_hyper,
        arch_rng=substream(seed, "arch-init"),
        aggregation=aggregation,
    )


def search_loop(
    g: Graph,
    spec: BlockSpec,
    cfg: SearchConfig,
    loss_cfg: LossConfig = LossConfig(),
    blocks: int = 2,
    hidden_dim: int = 256,
    op_hyper: Optional[dict] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    aggregation: str = "sum",
) -> SearchResult:
    require_splits(g, "train", "val")
    net = build_supernet(g, spec, blocks, hidden_dim, cfg.seed, op_hyper, aggregation)
    w_opt = Adam(net.weights(), cfg.lr_weights, cfg.weight_decay, cfg.betas, cfg.adam_eps)
    a_opt = Adam(net.arch_params(), cfg.lr_arch, cfg.weight_decay, cfg.betas, cfg.adam_eps)
    pair_rng = substream(cfg.seed, "pairs")
    blocklist = BlockList()
    history: list[dict] = []
    stale = 0
    for epoch in range(cfg.max_epochs):
        mode = OpMode(training=True, seed=substream_seed(cfg.seed, "masks", epoch))
        use_ovm = loss_cfg.lambda_ovm > 0
        problem = NetProblem(
            net,
            g,
            loss_cfg,
            mode,
            train_pairs=sample_pairs(g.train_mask, loss_cfg.n_sample_pairs, pair_rng) if use_ovm else None,
            val_pairs=sample_pairs(g.val_mask, loss_cfg.n_sample_pairs, pair_rng) if use_ovm else None,
        )
        if epoch >= cfg.warmup_epochs:
            a_opt.step(arch_gradient(problem, cfg))

        net.zero_grad()
        loss = problem.train_loss()
        train_loss = loss.item()
        if not _finite(train_loss):
            raise DivergenceError(
                f"non-finite training loss at epoch {epoch}",
                {"epoch": epoch, "train_loss": train_loss, "history": history[-5:]},
            )
        ad.backward(loss)
        w_opt.step()

        arch = derive_architecture(net.lam, spec, blocks, hidden_dim, op_hyper)
        score, val_acc, val_mad = validation_score(net, arch, g)
        if not _finite(score):
            raise DivergenceError(f"non-finite validation score at epoch {epoch}", {"epoch": epoch, "score": score})
        grew = blocklist.offer(arch, score)
        stale = 0 if grew else stale + 1
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_acc": val_acc,
            "val_mad": val_mad,
            "blocklist_size": len(blocklist),
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.info("search epoch %d loss %.4f val_acc %.4f val_mad %.2f |L|=%d", epoch, train_loss, val_acc, val_mad, len(blocklist))
        if stale >= cfg.patience:
            break
    return SearchResult(blocklist, net, history)


# ---------------------------------------------------------------- retraining


@dataclass
class RetrainResult:
    net: Network
    report: EvalReport
    history: list[dict]
    best_epoch: int


def predict(net: Network, g: Graph):
    y_pred, x_tilde, _ = net.forward(g, EVAL)
    return y_pred.data.argmax(axis=1), x_tilde.data


def report_for(net: Network, g: Graph, split: str = "test", mad_split: str = "all") -> EvalReport:
    pred, x_tilde = predict(net, g)
    mad_mask = None if mad_split == "all" else g.mask(mad_split)
    return evaluate(pred, g.labels, x_tilde, g.mask(split), g.num_classes, mad_mask)


def train_network(
    net: Network,
    g: Graph,
    cfg: SearchConfig,
    loss_cfg: LossConfig,
    seed: int,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> tuple[list[dict], int]:
    """Fit weights on the train mask, early-stopping on validation accuracy; best weights are restored."""
    opt = Adam(net.weights(), cfg.lr_weights, cfg.weight_decay, cfg.betas, cfg.adam_eps)
    pair_rng = substream(seed, "retrain-pairs")
    best_acc, best_epoch, best_state = -1.0, -1, None
    history: list[dict] = []
    for epoch in range(cfg.retrain_epochs):
        mode = OpMode(training=True, seed=substream_seed(seed, "retrain-masks", epoch))
        pairs = sample_pairs(g.train_mask, loss_cfg.n_sample_pairs, pair_rng) if loss_cfg.lambda_ovm > 0 else None
        net.zero_grad()
        y_pred, x_tilde, _ = net.forward(g, mode)
        loss = total_loss(y_pred, x_tilde, g.labels, g.train_mask, loss_cfg, pairs=pairs)
        value = loss.item()
        if not _finite(value):
            raise DivergenceError(f"non-finite training loss at retrain epoch {epoch}", {"epoch": epoch, "history": history[-5:]})
        ad.backward(loss)
        opt.step()
        pred, _ = predict(net, g)
        val_acc = accuracy(pred, g.labels, g.val_mask)
        record = {"epoch": epoch, "train_loss": value, "val_acc": val_acc}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = {k: v.copy() for k, v in net.state_dict().items()}
        elif epoch - best_epoch >= cfg.retrain_patience:
            break
    if best_state is not None:
        net.load_state_dict(best_state)
    return history, best_epoch


def retrain_derived(
    arch: DerivedArch,
    g: Graph,
    cfg: SearchConfig,
    loss_cfg: LossConfig = LossConfig(),
    seed: Optional[int] = None,
    op_hyper: Optional[dict] = None,
    mad_split: str = "all",
    on_epoch: Optional[Callable[[dict], None]] = None,
    aggregation: str = "sum",
) -> RetrainResult:
    require_splits(g, "train", "val", "test")
    seed = cfg.seed if seed is None else seed
    net = build_discrete_model(
        arch, g.feature_dim, g.num_classes, rng=substream(seed, "retrain-weights"), op_hyper=op_hyper, aggregation=aggregation
    )
    history, best_epoch = train_network(net, g, cfg, loss_cfg, seed, on_epoch)
    return RetrainResult(net, report_for(net, g, "test", mad_split), history, best_epoch)


def search_config_dict(cfg: SearchConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
