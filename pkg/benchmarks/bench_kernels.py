"""Compare the compiled and pure-numpy kernel backends.

Runs the hot training kernels under both settings of PROVSHIFT_NUMBA and
prints per-kernel timings plus an end-to-end training-step comparison.
Results are also checked for agreement so a backend mismatch is loud.

Usage: python3 benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import os
import subprocess
import sys
import time
import json

import numpy as np


def bench_one_backend(repeats):
    from provshift.backend import backend_name
    from provshift import kernels as K
    from provshift import model as M
    from provshift.algorithms import make_algorithm
    from provshift.sampler import solve_joint
    from provshift.synthgen import GenConfig, generate

    rng = np.random.default_rng(0)
    n, d, h = 256, 64, 32
    X = np.ascontiguousarray(rng.standard_normal((n, d)))
    W1 = np.ascontiguousarray(rng.standard_normal((d, h)) / np.sqrt(d))
    b1 = np.zeros(h)
    dH = np.ascontiguousarray(rng.standard_normal((n, h)))
    logits = np.ascontiguousarray(rng.standard_normal((n, 2)))
    p = rng.standard_normal(d * h)
    g = rng.standard_normal(d * h)
    m = np.zeros(d * h)
    v = np.zeros(d * h)

    def timeit(fn):
        fn()  # warm up (compilation for the jit backend)
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        return (time.perf_counter() - t0) / repeats

    results = {"backend": backend_name()}
    S1, H = K.hidden_forward(X, W1, b1, 0)
    results["hidden_forward"] = timeit(lambda: K.hidden_forward(X, W1, b1, 0))
    results["softmax2"] = timeit(lambda: K.softmax2(logits))
    results["backprop_hidden"] = timeit(
        lambda: K.backprop_hidden(X, S1, H, W1, dH, 0))
    results["dense_backward"] = timeit(lambda: K.dense_backward(H, logits))
    results["adamw_update"] = timeit(
        lambda: K.adamw_update(p, g, m, v, 1e-3, 0.0, 0.9, 0.999, 1e-8,
                               0.1, 0.001))

    # end-to-end: one full ERM training step on realistic shapes
    jt = solve_joint(-0.6)
    data = generate(GenConfig(n=1000, joint=jt, d_core=3, d_spur=3, d_noise=2,
                              core_strength=2.0, spur_strength=2.0,
                              subjects=200, seed=0))
    alg = make_algorithm("ERM", {"lr": 1e-3}, data, seed=0, budget_steps=10)
    results["train_step"] = timeit(alg.step)

    # agreement fingerprint: deterministic forward on fixed inputs
    results["fingerprint"] = float(np.sum(H) + np.sum(S1))
    return results


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--single", action="store_true",
                    help="run only the current backend and print JSON")
    args = ap.parse_args()

    if args.single:
        print(json.dumps(bench_one_backend(args.repeats)))
        return

    rows = {}
    for flag in ("1", "0"):
        env = dict(os.environ, PROVSHIFT_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__),
             "--single", "--repeats", str(args.repeats)],
            env=env, capture_output=True, text=True, check=True)
        rows[flag] = json.loads(out.stdout.strip().splitlines()[-1])

    fast, slow = rows["1"], rows["0"]
    if fast["fingerprint"] != slow["fingerprint"]:
        print("WARNING: backends disagree on the forward fingerprint",
              file=sys.stderr)
    print(f"{'kernel':<18} {fast['backend']:>12} {slow['backend']:>12} "
          f"{'speedup':>8}")
    for key in ("hidden_forward", "softmax2", "backprop_hidden",
                "dense_backward", "adamw_update", "train_step"):
        a, b = fast[key], slow[key]
        print(f"{key:<18} {a * 1e6:>10.1f}us {b * 1e6:>10.1f}us "
              f"{b / a:>7.2f}x")


if __name__ == "__main__":
    main()
