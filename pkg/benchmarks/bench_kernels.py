"""Compiled vs. numpy edge kernels, plus one supernet training step per backend.

    python3 benchmarks/bench_kernels.py [--nodes 2000] [--degree 10] [--dim 64]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from grato import kernels

STEP_SNIPPET = """
import time, numpy as np
from grato import BlockSpec, LossConfig, Network, SbmConfig, generate_sbm, kernels
from grato import autodiff as ad
from grato.objective import total_loss
from grato.ops import OpMode
g = generate_sbm(SbmConfig(seed=0))
net = Network(g.feature_dim, g.num_classes, BlockSpec(), 2, 32, rng=np.random.default_rng(0))
def step(s):
    net.zero_grad()
    y, xt, _ = net.forward(g, OpMode(True, s))
    ad.backward(total_loss(y, xt, g.labels, g.train_mask, LossConfig(), rng=np.random.default_rng(s)))
step(0)
t = time.perf_counter()
for s in range(3):
    step(s)
print(kernels.BACKEND, (time.perf_counter() - t) / 3)
"""


def random_edges(n, degree, rng):
    e = n * degree
    return rng.integers(0, n, e), rng.integers(0, n, e), rng.random(e)


def bench(fn, repeat=5):
    number = 3
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--nodes", type=int, default=2000)
    ap.add_argument("--degree", type=int, default=10)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--skip-step", action="store_true", help="skip the end-to-end supernet step")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n, d = args.nodes, args.dim
    rows, cols, w = random_edges(n, args.degree, rng)
    x = rng.standard_normal((n, d))
    scores = rng.standard_normal(rows.size)
    impls = kernels.backends()
    cases = {
        "spmm": lambda m: m.spmm(rows, cols, w, x, n),
        "segment_sum": lambda m: m.segment_sum(scores, rows, n),
        "segment_softmax": lambda m: m.segment_softmax(scores, rows, n),
        "edge_dot": lambda m: m.edge_dot(rows, cols, x, x),
    }
    print(f"nodes={n} edges={rows.size} dim={d}; active backend: {kernels.BACKEND}")
    if "cython" not in impls:
        print("compiled extension not built; only the numpy fallback is timed")
    print(f"{'kernel':<16}" + "".join(f"{name:>14}" for name in impls) + ("      speedup" if len(impls) > 1 else ""))
    for label, call in cases.items():
        times = {name: bench(lambda m=m: call(m)) for name, m in impls.items()}
        line = f"{label:<16}" + "".join(f"{times[k] * 1e3:>11.3f} ms" for k in impls)
        if "cython" in times:
            ref = call(impls["python"])
            assert np.allclose(call(impls["cython"]), ref, rtol=1e-10, atol=1e-12), label
            line += f"   {times['python'] / times['cython']:>8.1f}x"
        print(line)

    if args.skip_step:
        return
    print("\nsupernet training step (300-node SBM, B=2, d=32):")
    for pure in ("0", "1"):
        env = {**os.environ, "GRATO_PURE_PYTHON": pure}
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"  {backend:<8} {float(secs) * 1e3:8.1f} ms/step")


if __name__ == "__main__":
    main()
