import numpy as np
import pytest

from grato import autodiff as ad
from grato.graph import Graph, SbmConfig, SparseAdj, generate_sbm


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def grad_check(build, tensors, step=1e-5):
    """Largest relative error between backward() and central differences over ``tensors``."""
    for t in tensors:
        t.zero_grad()
    ad.backward(build())
    analytic = [t.grad.copy() for t in tensors]
    return max(rel_err(g, ad.numeric_grad(build, t, step)) for g, t in zip(analytic, tensors))


def random_adj(n, p, rng):
    iu, ju = np.triu_indices(n, k=1)
    hit = rng.random(iu.size) < p
    return SparseAdj.from_edges(n, np.stack([iu[hit], ju[hit]], axis=1), symmetrize=True)


def param(rng, *shape, scale=1.0):
    return ad.Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_graph() -> Graph:
    return generate_sbm(SbmConfig(nodes_per_community=25, train_per_class=5, val_per_class=8, feature_dim=6, p_intra=0.3, p_inter=0.03, feature_signal=2.0, seed=3))


def stencil_is_smooth(build, tensors, step=1e-5, tol=1e-4):
    """False when a ReLU-style kink sits inside the central-difference stencil.

    Detected by central differences at ``step`` and ``step / 10`` disagreeing;
    the analytic gradient plays no part in this decision.
    """
    return all(rel_err(ad.numeric_grad(build, t, step), ad.numeric_grad(build, t, step / 10)) < tol for t in tensors)


# ---------------------------------------------------------------- acceptance summary

CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record ``(passed, detail)`` for an acceptance criterion; printed at the end of the run."""

    def record(number: int, passed: bool, detail: str) -> bool:
        CRITERIA[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
