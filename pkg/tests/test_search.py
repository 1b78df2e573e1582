from dataclasses import dataclass

import numpy as np
import pytest

from grato import autodiff as ad
from grato.autodiff import Tensor
from grato.graph import ConfigError, SbmConfig, generate_sbm
from grato.objective import LossConfig
from grato.search import (
    Adam,
    BlockList,
    DivergenceError,
    SearchConfig,
    arch_gradient,
    build_supernet,
    combine_score,
    retrain_derived,
    search_loop,
)
from grato.supernet import BlockSpec, DerivedArch, Keep

TINY_SPEC = BlockSpec(n_intermediate=2, top_k=1)


# ---------------------------------------------------------------- Adam


def adam_oracle(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        g = g + wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_adam_matches_scalar_oracle(rng):
    p = Tensor(rng.standard_normal((2, 3)))
    start = p.data.copy()
    grads = [rng.standard_normal((2, 3)) for _ in range(7)]
    opt = Adam([p], lr=0.01, wd=1e-2)
    for g in grads:
        opt.step([g])
    assert np.allclose(p.data, adam_oracle(start, grads, 0.01, 1e-2), rtol=0, atol=1e-14)


def test_adam_first_step_moves_by_lr():
    p = Tensor([[1.0, -1.0]])
    Adam([p], lr=0.1).step([np.array([[3.0, -0.5]])])
    assert np.allclose(p.data, [[0.9, -0.9]], atol=1e-8)


def test_adam_rejects_mismatched_gradient():
    with pytest.raises(ValueError):
        Adam([Tensor([[1.0]])], lr=0.1).step([np.ones((1, 2))])


# ---------------------------------------------------------------- bilevel toy


@dataclass
class QuadraticBilevel:
    """L_train = w'Aw/2 - w'Bα,  L_val = |w - c|²/2 + α'Dα/2 with closed-form hypergradients."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    D: np.ndarray
    w: Tensor
    alpha: Tensor

    def weights(self):
        return [self.w]

    def arch_params(self):
        return [self.alpha]

    def train_loss(self):
        quad = ad.mul(self.w, ad.matmul(Tensor(self.A), self.w))
        cross = ad.mul(self.w, ad.matmul(Tensor(self.B), self.alpha))
        return ad.sub(ad.scale(ad.sum_all(quad), 0.5), ad.sum_all(cross))

    def val_loss(self):
        diff = ad.sub(self.w, Tensor(self.c))
        reg = ad.mul(self.alpha, ad.matmul(Tensor(self.D), self.alpha))
        return ad.scale(ad.add(ad.sum_all(ad.mul(diff, diff)), ad.sum_all(reg)), 0.5)

    def analytic(self, xi):
        w, a = self.w.data, self.alpha.data
        w_next = w - xi * (self.A @ w - self.B @ a)
        g_val_w = w_next - self.c
        # dw'/dα = ξB, so the chain rule adds ξ Bᵀ ∇_w' L_val
        return self.D @ a + xi * self.B.T @ g_val_w

    def first_order(self):
        return self.D @ self.alpha.data


def make_toy(seed, n=5, m=3):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, n))
    d = rng.standard_normal((m, m))
    return QuadraticBilevel(
        A=q @ q.T + n * np.eye(n),
        B=rng.standard_normal((n, m)),
        c=rng.standard_normal((n, 1)),
        D=d @ d.T + np.eye(m),
        w=Tensor(rng.standard_normal((n, 1)), requires_grad=True),
        alpha=Tensor(rng.standard_normal((m, 1)), requires_grad=True),
    )


@pytest.mark.parametrize("seed", range(10))
def test_second_order_matches_analytic_hypergradient(seed):
    toy = make_toy(seed)
    cfg = SearchConfig(order="second", lr_weights=0.05)
    got = arch_gradient(toy, cfg)[0]
    expected = toy.analytic(0.05)
    assert np.max(np.abs(got - expected)) / np.max(np.abs(expected)) < 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_first_order_is_exact_validation_gradient(seed):
    toy = make_toy(seed)
    got = arch_gradient(toy, SearchConfig(order="first"))[0]
    assert np.allclose(got, toy.first_order(), rtol=0, atol=1e-14)


def test_xi_overrides_weight_learning_rate():
    toy = make_toy(3)
    got = arch_gradient(toy, SearchConfig(lr_weights=0.5, xi=0.01))[0]
    assert np.allclose(got, toy.analytic(0.01), rtol=1e-6)


def test_literal_order_uses_half_difference():
    toy = make_toy(4)
    second = arch_gradient(toy, SearchConfig(order="second"))[0]
    literal = arch_gradient(toy, SearchConfig(order="paper_literal"))[0]
    first = toy.first_order()
    assert not np.allclose(second, literal)
    # both are first-order plus a multiple of the same finite-difference term
    d_second, d_literal = second - toy.D @ toy.alpha.data, literal - first
    cos = float(d_second.ravel() @ d_literal.ravel()) / (np.linalg.norm(d_second) * np.linalg.norm(d_literal))
    assert abs(abs(cos) - 1.0) < 1e-6


@pytest.mark.parametrize("order", ["first", "second", "paper_literal"])
def test_weights_restored_bitwise(order):
    toy = make_toy(5)
    before = toy.w.data.copy()
    arch_gradient(toy, SearchConfig(order=order))
    assert np.array_equal(toy.w.data, before)


# ---------------------------------------------------------------- search loop


def tiny_arch(n=2):
    return DerivedArch(n, 1, 1, 4, tuple((Keep(0, "gcn"),) for _ in range(n)))


def test_block_list_only_accepts_strict_improvements():
    bl = BlockList()
    assert bl.best() is None
    assert bl.offer(tiny_arch(), 0.5)
    assert not bl.offer(tiny_arch(1), 0.5)
    assert bl.offer(tiny_arch(1), 0.6)
    assert len(bl) == 2 and bl.best() == tiny_arch(1)


def test_accuracy_dominates_mad_in_score():
    assert combine_score(0.5001, 0.0) > combine_score(0.5, 200.0)
    assert combine_score(0.5, 10.0) > combine_score(0.5, 9.0)


def test_zero_epochs_gives_empty_block_list(small_graph):
    res = search_loop(small_graph, TINY_SPEC, SearchConfig(max_epochs=0), blocks=1, hidden_dim=4)
    assert len(res.blocklist) == 0 and res.history == []


def test_search_is_deterministic_and_block_list_increases(small_graph):
    cfg = SearchConfig(max_epochs=4, seed=3)
    runs = [search_loop(small_graph, TINY_SPEC, cfg, LossConfig(n_sample_pairs=50), blocks=1, hidden_dim=4) for _ in range(2)]
    assert runs[0].history == runs[1].history
    assert runs[0].blocklist.entries == runs[1].blocklist.entries
    scores = [s for _, s in runs[0].blocklist.entries]
    assert scores == sorted(scores) and len(set(scores)) == len(scores)
    assert len(runs[0].history) == 4


def test_patience_stops_search(small_graph):
    res = search_loop(small_graph, TINY_SPEC, SearchConfig(max_epochs=50, patience=1, order="first"), blocks=1, hidden_dim=4)
    assert len(res.history) < 50


def test_divergence_is_reported(small_graph):
    cfg = SearchConfig(max_epochs=30, lr_weights=1e200, order="first")
    with pytest.raises(DivergenceError) as info:
        search_loop(small_graph, TINY_SPEC, cfg, blocks=1, hidden_dim=4)
    assert "epoch" in info.value.snapshot


def test_retrain_smoke_learns_easy_graph(small_graph):
    arch = DerivedArch(1, 1, 1, 8, ((Keep(0, "gcn"),),))
    res = retrain_derived(arch, small_graph, SearchConfig(retrain_epochs=60, seed=1, lr_weights=0.02), LossConfig(lambda_ovm=0.0))
    assert res.report.accuracy > 0.6
    assert 0 <= res.best_epoch < 60


@pytest.mark.parametrize(
    "kwargs",
    [{"lr_weights": 0.0}, {"order": "third"}, {"max_epochs": -1}, {"patience": 0}, {"warmup_epochs": -2}, {"epsilon_scale": 0}],
)
def test_search_config_validation(kwargs):
    with pytest.raises((ValueError, ConfigError)):
        SearchConfig(**kwargs)


def test_score_examples_and_monotonicity(rng):
    assert combine_score(1.0, 0.0) == 1.0
    for _ in range(200):
        a, b = sorted(rng.random(2))
        m = rng.uniform(0, 200)
        assert combine_score(a, m) <= combine_score(b, m)


def test_first_order_search_with_frozen_lambda_is_plain_training(small_graph):
    cfg = SearchConfig(max_epochs=3, order="first", lr_arch=1e-300, seed=2)
    res = search_loop(small_graph, TINY_SPEC, cfg, LossConfig(lambda_ovm=0.0), blocks=1, hidden_dim=4)
    start = build_supernet(small_graph, TINY_SPEC, 1, 4, 2)
    for lam, lam0 in zip(res.net.arch_params(), start.arch_params()):
        assert np.allclose(lam.data, lam0.data, rtol=0, atol=1e-250)


def test_retrain_loss_decreases_early_on_separable_toy():
    g = generate_sbm(SbmConfig(communities=2, nodes_per_community=80, p_intra=0.2, p_inter=0.0, feature_signal=5.0, feature_dim=4, seed=0))
    arch = DerivedArch(1, 1, 1, 8, ((Keep(0, "gcn"),),))
    res = retrain_derived(arch, g, SearchConfig(retrain_epochs=10, seed=0), LossConfig(lambda_ovm=0.0))
    losses = [h["train_loss"] for h in res.history]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


@pytest.mark.parametrize("op", ["pairnorm", "dropattr_e", "sgc"])
def test_degenerate_single_op_arch_trains_deterministically(small_graph, op):
    arch = DerivedArch(1, 1, 2, 4, ((Keep(0, op, {"K": 2} if op == "sgc" else {}),),))
    cfg = SearchConfig(retrain_epochs=5, seed=4)
    a = retrain_derived(arch, small_graph, cfg)
    b = retrain_derived(arch, small_graph, cfg)
    assert a.report == b.report
