"""Compare the compiled and pure-Python LSTM kernels.

    python3 benchmarks/bench_kernels.py [--windows 100] [--repeat 3]

Times one training epoch, a batched forward pass and a single-window
gradient for each architecture, and checks both kernels agree.
"""

import argparse
import time

import numpy as np

from peerfl import neuralnet as nn
from peerfl._backend import available, get_kernels


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workload(arch, n_windows, window_len, seed=0):
    rng = np.random.default_rng(seed)
    slots = (rng.random(n_windows * window_len + 1) < 0.1).astype(np.int64)
    X = np.eye(arch.input_dim)[slots[:-1]].reshape(n_windows, window_len, arch.input_dim)
    Y = slots[1:].reshape(n_windows, window_len)
    theta = nn.init_params(arch, seed).values
    return np.ascontiguousarray(X), np.ascontiguousarray(Y), theta


def bench(arch, name, n_windows, window_len, repeat):
    X, Y, theta0 = workload(arch, n_windows, window_len)
    m, P, Q = arch.dims
    order = np.arange(n_windows, dtype=np.int64)
    rows = {}
    finals = {}
    for backend in available():
        k = get_kernels(backend)

        def epoch():
            th = theta0.copy()
            k.train_epoch(th, m, P, Q, X, Y, order, 0.05, 5.0)
            finals[backend] = th

        grad = np.empty_like(theta0)
        rows[backend] = (
            best_of(epoch, repeat),
            best_of(lambda: k.forward_logits(theta0, m, P, Q, X), repeat),
            best_of(lambda: k.loss_and_grad(theta0, m, P, Q, X[0], Y[0], grad), repeat),
        )
    print(f"\n{name} ({arch.n_params} params), {n_windows} windows x {window_len} steps")
    print(f"{'backend':<8} {'epoch s':>10} {'forward s':>10} {'grad ms':>10}")
    for backend, (ep, fw, gr) in rows.items():
        print(f"{backend:<8} {ep:>10.4f} {fw:>10.4f} {gr * 1e3:>10.3f}")
    if len(rows) == 2:
        c, p = rows["cython"], rows["python"]
        print(f"speedup  {p[0] / c[0]:>10.1f} {p[1] / c[1]:>10.1f} {p[2] / c[2]:>10.1f}")
        drift = np.abs(finals["cython"] - finals["python"]).max()
        print(f"max parameter difference after one epoch: {drift:.2e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--windows", type=int, default=100)
    ap.add_argument("--window-len", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    print(f"backends available: {', '.join(available())}")
    bench(nn.T_S, "t_s", args.windows, args.window_len, args.repeat)
    bench(nn.T_B, "t_b", max(1, args.windows // 20), args.window_len, 1)


if __name__ == "__main__":
    main()
