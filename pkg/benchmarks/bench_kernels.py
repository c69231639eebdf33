#!/usr/bin/env python3
"""Benchmark the compiled kernels against the NumPy reference.

Times each kernel on pipeline-representative shapes with both backends,
checks that the outputs agree, and reports the speedups.  A small
end-to-end bond-training benchmark compares the backends on real work:

    python3 benchmarks/bench_kernels.py [--train] [--repeats N]
"""
import argparse
import time

import numpy as np

from spacebond.kernels import pyref

try:
    from spacebond import _fastcore
except ImportError:
    _fastcore = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    b, pool, d, hidden = 256, 256, 96, 128
    cases = []

    scores32 = np.ascontiguousarray(rng.standard_normal((b, pool)).astype(np.float32))
    cases.append(("softmax_rows f32 256x256",
                  lambda impl: impl.softmax_rows(scores32, 100.0)))

    logits = np.ascontiguousarray(rng.standard_normal((b, b)))
    cases.append(("softmax_xent_rows f64 256x256",
                  lambda impl: impl.softmax_xent_rows(logits)))

    pre = np.ascontiguousarray(rng.standard_normal((b, hidden)))
    cases.append(("gelu f64 256x128", lambda impl: impl.gelu(pre)))
    cases.append(("gelu_grad f64 256x128", lambda impl: impl.gelu_grad(pre)))

    z = np.ascontiguousarray(rng.standard_normal((b, d)))
    cases.append(("normalize_fwd f64 256x96", lambda impl: impl.normalize_rows_fwd(z)))

    y, norms = pyref.normalize_rows_fwd(z)
    dy = np.ascontiguousarray(rng.standard_normal((b, d)))
    y = np.ascontiguousarray(y)
    cases.append(("normalize_bwd f64 256x96",
                  lambda impl: impl.normalize_rows_bwd(y, norms, dy)))

    n_params = d * hidden + hidden + hidden * d + d
    flat = [np.ascontiguousarray(rng.standard_normal(n_params)) for _ in range(4)]
    flat[3] = np.abs(flat[3])

    def adam(impl):
        p, g, m, v = (a.copy() for a in flat)
        impl.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 0.1, 1e-3, 1e-8)

    cases.append((f"adam_update f64 {n_params} params", adam))

    print(f"{'kernel':<34}{'numpy':>12}{'compiled':>12}{'speedup':>10}")
    for name, fn in cases:
        t_py = timeit(lambda: fn(pyref), repeats)
        if _fastcore is None:
            print(f"{name:<34}{t_py * 1e6:>10.1f}us{'-':>12}{'-':>10}")
            continue
        t_fast = timeit(lambda: fn(_fastcore), repeats)
        print(f"{name:<34}{t_py * 1e6:>10.1f}us{t_fast * 1e6:>10.1f}us"
              f"{t_py / t_fast:>9.2f}x")

    if _fastcore is not None:
        w_py = pyref.softmax_rows(scores32, 100.0)
        w_fast = _fastcore.softmax_rows(scores32, 100.0)
        assert np.abs(w_py - w_fast).max() < 1e-6, "backend outputs disagree"
        print("\nbackend agreement: softmax max abs diff "
              f"{np.abs(w_py - w_fast).max():.2e}")


def bench_training(repeats):
    """One projector trained on a small bond, per backend selection."""
    import os
    import subprocess
    import sys

    script = (
        "import time, numpy as np\n"
        "from spacebond import kernels, bonds\n"
        "from spacebond.neural import TrainConfig\n"
        "from spacebond.synth import generate_world, realize_space, SpaceSpec\n"
        "world = generate_world(600, 32, 1)\n"
        "uni = realize_space(world, SpaceSpec('u', 48, ('audio','image','text'),"
        " {'audio': 2.0, 'image': 1.0, 'text': 1.0}, seed=2))\n"
        "at = realize_space(world, SpaceSpec('e', 40, ('audio','text'),"
        " {'audio': 0.8, 'text': 1.5}, seed=3))\n"
        "cfg = TrainConfig(epochs=3, batch_size=128, hidden=64)\n"
        "start = time.time()\n"
        "bonds.train_combination_bond(uni, at, np.arange(480), cfg, seed=9)\n"
        "print(f'{kernels.BACKEND} backend: {time.time() - start:.2f}s')\n"
    )
    for backend in ("py", "fast"):
        env = dict(os.environ, SPACEBOND_KERNELS=backend)
        result = subprocess.run(
            [sys.executable, "-c", script], env=env, capture_output=True, text=True
        )
        if result.returncode != 0:
            print(f"{backend}: unavailable ({result.stderr.strip().splitlines()[-1]})")
        else:
            print(result.stdout.strip())


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=50)
    parser.add_argument("--train", action="store_true",
                        help="also run the end-to-end training comparison")
    args = parser.parse_args()
    if _fastcore is None:
        print("compiled backend not built (pip install -e . builds it); "
              "showing numpy timings only\n")
    bench_kernels(args.repeats)
    if args.train:
        print("\nend-to-end bond training (3 epochs, 7 projectors):")
        bench_training(args.repeats)


if __name__ == "__main__":
    main()
