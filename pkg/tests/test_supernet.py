import itertools
import json

import numpy as np
import pytest

from grato import autodiff as ad
from grato.autodiff import ShapeError, Tensor
from grato.graph import Graph, SparseAdj
from grato.objective import LossConfig, total_loss
from grato.ops import EVAL, OP_KINDS, OpMode, SearchOp
from grato.supernet import (
    BlockSpec,
    DerivedArch,
    Keep,
    Network,
    build_discrete_model,
    derive_architecture,
    mixed_edge_forward,
    node_aggregate,
)

from conftest import grad_check, random_adj, stencil_is_smooth


def tiny_graph(seed, n=12, d=4, c=3):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % c
    train = np.zeros(n, bool)
    train[:6] = True
    val = np.zeros(n, bool)
    val[6:9] = True
    return Graph(rng.standard_normal((n, d)), labels, random_adj(n, 0.35, rng), train, val, ~(train | val), c)


# ---------------------------------------------------------------- mixed edges


def test_mixed_edge_with_one_op_equals_that_op(rng):
    adj = random_adj(8, 0.4, rng)
    x = Tensor(rng.standard_normal((8, 3)))
    op = SearchOp("gcn", 3, rng)
    out, a2 = mixed_edge_forward(x, adj, Tensor([[0.7]]), [op])
    expected, _ = op(x, adj)
    assert np.array_equal(out.data, expected.data)
    assert np.array_equal(a2.weight, adj.weight)


def test_mixed_edge_uniform_lambda_averages_ops(rng):
    adj = random_adj(8, 0.4, rng)
    x = Tensor(rng.standard_normal((8, 3)))
    ops = [SearchOp(k, 3, rng, uid=i) for i, k in enumerate(OP_KINDS)]
    out, _ = mixed_edge_forward(x, adj, Tensor(np.full((1, len(ops)), 2.5)), ops)
    mean = np.mean([op(x, adj)[0].data for op in ops], axis=0)
    assert np.allclose(out.data, mean, atol=1e-12)


def test_mixed_edge_multiplies_adjacency_masks(rng):
    adj = random_adj(20, 0.3, rng)
    x = Tensor(rng.standard_normal((20, 3)))
    mode = OpMode(True, 9)
    ops = [SearchOp("dropedge", 3, rng, uid=1, hyper={"p": 0.5}), SearchOp("gcn", 3, rng)]
    _, a2 = mixed_edge_forward(x, adj, Tensor([[0.0, 0.0]]), ops, mode)
    _, dropped = ops[0](x, adj, mode)
    assert np.array_equal(a2.weight, dropped.weight)


def test_mixed_edge_rejects_bad_lambda_shape(rng):
    op = SearchOp("gcn", 2, rng)
    with pytest.raises(ShapeError):
        mixed_edge_forward(Tensor(np.ones((3, 2))), random_adj(3, 1.0, rng), Tensor([[0.0, 1.0]]), [op])
    with pytest.raises(ValueError):
        mixed_edge_forward(Tensor(np.ones((3, 2))), random_adj(3, 1.0, rng), Tensor(np.zeros((1, 0))), [])


def test_node_aggregate_sums_relus_and_multiplies_masks(rng):
    adj = random_adj(6, 0.6, rng)
    a, b = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    w1 = (rng.random(adj.num_edges) < 0.5).astype(float)
    w2 = (rng.random(adj.num_edges) < 0.5).astype(float)
    x, a_out = node_aggregate([(Tensor(a), adj.with_weight(w1)), (Tensor(b), adj.with_weight(w2))])
    assert np.array_equal(x.data, np.maximum(a + b, 0.0))
    assert np.array_equal(a_out.weight, w1 * w2)
    mean_x, _ = node_aggregate([(Tensor(a), adj), (Tensor(b), adj)], "mean")
    assert np.allclose(mean_x.data, np.maximum((a + b) / 2, 0.0))


def test_block_adjacency_masks_only_shrink():
    g = tiny_graph(0, n=30)
    net = Network(4, 3, BlockSpec(n_intermediate=2), blocks=2, hidden_dim=3)
    mode = OpMode(True, 5)
    enc = (ad.matmul(Tensor(g.features), net.encoder), g.adj)
    x, a = net.block_forward(0, enc, enc, mode)
    assert x.shape == (30, 3)
    assert np.all(a.weight <= g.adj.weight)


# ---------------------------------------------------------------- full network


def test_supernet_outputs_are_row_stochastic():
    g = tiny_graph(1)
    y, x_tilde, _ = Network(4, 3, BlockSpec(n_intermediate=2), blocks=2, hidden_dim=5).forward(g)
    assert y.shape == (12, 3) and x_tilde.shape == (12, 5)
    assert np.all(np.abs(y.data.sum(axis=1) - 1.0) < 1e-12)


def test_network_rejects_mismatched_features():
    g = tiny_graph(1)
    with pytest.raises(ShapeError):
        Network(5, 3, BlockSpec(n_intermediate=1), blocks=1, hidden_dim=2).forward(g)


def supernet_problem(seed):
    g = tiny_graph(seed)
    # even seeds cover intermediate-to-intermediate edges, odd seeds cover block stacking
    n_int, blocks = (2, 1) if seed % 2 == 0 else (1, 2)
    net = Network(
        4, 3, BlockSpec(n_intermediate=n_int), blocks=blocks, hidden_dim=3,
        rng=np.random.default_rng(seed), arch_rng=np.random.default_rng(seed + 100),
    )
    for lam in net.arch_params():
        lam.data = np.random.default_rng(seed).standard_normal(lam.shape)
    mode = OpMode(True, seed)
    pairs = np.array([[i, j] for i in range(6) for j in range(6) if i != j])
    cfg = LossConfig(lambda_ovm=1.0)

    def build():
        y, x_tilde, _ = net.forward(g, mode)
        return total_loss(y, x_tilde, g.labels, g.train_mask, cfg, pairs=pairs)

    op_rng = np.random.default_rng(seed)
    ops = [net.ops[k] for k in sorted(net.ops)]
    sampled = [t for op in op_rng.choice(ops, 6, replace=False) for t in op.params.values()]
    return build, [net.encoder, net.classifier, *net.arch_params(), *sampled]


def supernet_gradient_errors(n_seeds=20, max_draws=40):
    """Relative errors on the first ``n_seeds`` draws whose stencil avoids a kink.

    The kink test only runs on a failing draw, so a genuine gradient bug on a
    smooth draw is still reported.
    """
    errors, skipped = {}, []
    for seed in range(max_draws):
        build, tensors = supernet_problem(seed)
        err = grad_check(build, tensors)
        if err >= 1e-4 and not stencil_is_smooth(build, tensors):
            skipped.append(seed)
            continue
        errors[seed] = err
        if len(errors) == n_seeds:
            break
    return errors, skipped


def test_full_supernet_gradient_matches_finite_differences():
    errors, skipped = supernet_gradient_errors()
    assert len(errors) == 20, skipped
    assert max(errors.values()) < 1e-4, errors


def test_state_dict_round_trip():
    g = tiny_graph(2)
    a = Network(4, 3, BlockSpec(n_intermediate=2), blocks=2, hidden_dim=3, rng=np.random.default_rng(0))
    b = Network(4, 3, BlockSpec(n_intermediate=2), blocks=2, hidden_dim=3, rng=np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    assert np.array_equal(a.forward(g)[0].data, b.forward(g)[0].data)
    with pytest.raises(ValueError):
        b.load_state_dict({"encoder": a.encoder.data})


def test_restrict_matches_discrete_model_with_copied_weights():
    g = tiny_graph(3)
    spec = BlockSpec(n_intermediate=2, top_k=2)
    sup = Network(4, 3, spec, blocks=2, hidden_dim=3, rng=np.random.default_rng(0))
    arch = derive_architecture(sup.lam, spec, blocks=2, hidden_dim=3)
    disc = build_discrete_model(arch, 4, 3)
    shared = sup.state_dict()
    disc.load_state_dict({k: shared[k] for k in disc.state_dict()})
    assert np.allclose(sup.forward(g, restrict=arch)[0].data, disc.forward(g)[0].data, atol=1e-14)


# ---------------------------------------------------------------- derivation


def brute_force_derive(lam, spec):
    nodes = []
    for j in spec.intermediate:
        scored = []
        for i in range(j):
            v = np.asarray(lam[(i, j)]).reshape(-1)
            alpha = np.exp(v) / np.exp(v).sum()
            for k, kind in enumerate(spec.op_kinds):
                scored.append((alpha[k], i, k, kind))
        best = []
        for combo in itertools.combinations(scored, spec.top_k):
            key = sorted(combo, key=lambda s: (-s[0], s[1], s[2]))
            cand = tuple((-s[0], s[1], s[2]) for s in key)
            if not best or cand < best[0]:
                best = [cand, key]
        nodes.append(tuple((s[1], s[3]) for s in best[1]))
    return nodes


def as_pairs(arch):
    return [tuple((k.src, k.op) for k in keep) for keep in arch.nodes]


def test_derivation_matches_brute_force_and_is_shift_invariant():
    spec = BlockSpec(n_intermediate=3, top_k=2, op_kinds=("gcn", "sage", "pairnorm", "dropedge"))
    rng = np.random.default_rng(0)
    for _ in range(200):
        lam = {e: rng.standard_normal((1, 4)) for e in spec.dag_edges()}
        arch = derive_architecture(lam, spec)
        assert as_pairs(arch) == brute_force_derive(lam, spec)
        shifted = {e: v + rng.uniform(-50, 50) for e, v in lam.items()}
        assert derive_architecture(shifted, spec) == arch


def test_derivation_keeps_all_when_too_few_candidates(caplog):
    spec = BlockSpec(n_intermediate=1, top_k=5, op_kinds=("gcn",))
    arch = derive_architecture({(0, 2): np.zeros(1), (1, 2): np.zeros(1)}, spec)
    assert len(arch.nodes[0]) == 2
    assert "top_k" in caplog.text


def test_derivation_carries_op_hyperparameters():
    spec = BlockSpec(n_intermediate=1, top_k=1, op_kinds=("sgc", "gcn"))
    arch = derive_architecture({(0, 2): np.array([5.0, 0.0]), (1, 2): np.zeros(2)}, spec, op_hyper={"sgc": {"K": 3}})
    assert arch.nodes[0][0] == Keep(0, "sgc", {"K": 3})


# ---------------------------------------------------------------- derived architecture document


def example_arch(blocks=3):
    return DerivedArch(
        3, 2, blocks, 16,
        (
            (Keep(0, "gcn"), Keep(1, "pairnorm")),
            (Keep(2, "gat", {"slope": 0.2}), Keep(0, "dropedge", {"p": 0.3})),
            (Keep(3, "sgc", {"K": 2}), Keep(2, "sage")),
        ),
    )


def test_arch_json_round_trip():
    arch = example_arch()
    text = arch.to_json()
    assert DerivedArch.from_json(text) == arch
    assert json.loads(text)["nodes"][0]["keep"][0] == {"from": 0, "op": "gcn", "hyper": {}}


def test_longest_subchain_and_effective_depth():
    arch = example_arch(blocks=3)
    assert arch.longest_subchain() == 3
    assert arch.effective_depth() == 9
    flat = DerivedArch(1, 1, 4, 8, ((Keep(0, "pairnorm"),),))
    assert flat.longest_subchain() == 0 and flat.effective_depth() == 0


@pytest.mark.parametrize(
    "nodes",
    [
        ((Keep(2, "gcn"),),),
        ((Keep(0, "conv"),),),
        ((),),
    ],
)
def test_invalid_arch_rejected(nodes):
    with pytest.raises(ValueError):
        DerivedArch(1, 1, 1, 4, nodes)


def test_malformed_arch_document():
    with pytest.raises(ValueError, match="malformed"):
        DerivedArch.from_dict({"n_intermediate": 1})


def test_discrete_model_has_only_kept_ops():
    arch = example_arch(blocks=2)
    net = build_discrete_model(arch, 5, 3)
    assert len(net.ops) == 2 * 6
    assert net.arch_params() == [] and not net.is_supernet


def test_spec_validation():
    with pytest.raises(ValueError):
        BlockSpec(n_intermediate=0)
    with pytest.raises(ValueError):
        BlockSpec(op_kinds=("gcn", "bogus"))
    assert BlockSpec(n_intermediate=4).dag_edges()[-1] == (4, 5)
    assert len(BlockSpec(n_intermediate=4).dag_edges()) == 2 + 3 + 4 + 5


def test_eval_forward_is_deterministic():
    g = tiny_graph(4)
    net = Network(4, 3, BlockSpec(n_intermediate=2), blocks=2, hidden_dim=3)
    assert np.array_equal(net.forward(g, EVAL)[1].data, net.forward(g, EVAL)[1].data)
