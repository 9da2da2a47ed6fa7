"""Compare the compiled kernel backend against the pure-numpy fallback.

Times the segment/scatter primitives on a synthetic edge workload and a full
training step on a generated corpus. Run from the repo root:

    python benchmarks/bench_kernels.py [--edges 200000] [--dim 64]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from cgsr import graphs, kernels, trainer


def timeit(fn, repeat=7):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_primitives(n_edges, n_nodes, dim):
    rng = np.random.default_rng(0)
    ids = np.sort(rng.integers(0, n_nodes, size=n_edges)).astype(np.int64)
    scores = rng.normal(size=n_edges)
    values = rng.normal(size=(n_edges, dim))
    w = rng.normal(size=n_edges)
    gout = rng.normal(size=(n_nodes, dim))
    alpha = kernels.fallback_impl("seg_softmax")(scores, ids, n_nodes)

    cases = [
        ("seg_softmax", lambda f: f(scores, ids, n_nodes)),
        ("seg_softmax_backward", lambda f: f(alpha, scores, ids, n_nodes)),
        ("seg_weighted_rowsum", lambda f: f(values, w, ids, n_nodes)),
        ("seg_weighted_rowsum_backward", lambda f: f(values, w, ids, gout)),
        ("scatter_rows", lambda f: f(np.zeros((n_nodes, dim)), ids, values)),
    ]
    print(f"\nprimitives: {n_edges} edges, {n_nodes} nodes, dim {dim}")
    print(f"{'kernel':<30} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for name, call in cases:
        t_np = timeit(lambda: call(kernels.fallback_impl(name)))
        if kernels.BACKEND == "compiled":
            t_c = timeit(lambda: call(getattr(kernels, name)))
            print(f"{name:<30} {t_np * 1e3:>8.2f}ms {t_c * 1e3:>8.2f}ms {t_np / t_c:>7.1f}x")
        else:
            print(f"{name:<30} {t_np * 1e3:>8.2f}ms {'n/a':>10} {'':>8}")


def bench_training_step(dim):
    from synth import N_ITEMS, planted_corpus

    sessions, _ = planted_corpus(seed=7)
    sg = graphs.build_session_graph([s.items for s in sessions], N_ITEMS)
    config = trainer.TrainConfig(dim=dim, heads=2, epochs=2, batch_size=100,
                                 val_fraction=0.0, seed=7)
    t0 = time.perf_counter()
    trainer.train(sessions, sg, config)
    steps = 2 * ((1000 + config.batch_size - 1) // config.batch_size)
    took = time.perf_counter() - t0
    print(f"\ntraining ({kernels.BACKEND} backend): {steps} steps, "
          f"{took:.2f}s total, {took / steps * 1e3:.1f}ms/step")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--edges", type=int, default=200_000)
    ap.add_argument("--nodes", type=int, default=20_000)
    ap.add_argument("--dim", type=int, default=64)
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND} (CGSR_NO_EXT=1 forces the fallback)")
    bench_primitives(args.edges, args.nodes, args.dim)
    bench_training_step(args.dim)


if __name__ == "__main__":
    main()
