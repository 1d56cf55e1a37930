"""Time the numba kernels against the numpy reference path.

    python3 benchmarks/bench_kernels.py [--points 1024] [--batch 16] [--repeat 5]

Each kernel runs once untimed (numba compiles on first call), then the best
of ``--repeat`` runs is reported. Outputs are compared so a speedup never
hides a mismatch.
"""
import argparse
import time

import numpy as np

from lrcnet import kernels


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(args):
    rng = np.random.default_rng(0)
    B, N = args.batch, args.points
    M, K = N // 4, 64
    pts = rng.uniform(-1, 1, (B, N, 3))
    starts = np.zeros(B, dtype=np.int64)
    cidx = kernels.fps_batch(pts, M, starts, backend="numpy")
    centers = np.stack([p[i] for p, i in zip(pts, cidx)])
    idx = rng.integers(0, M, (N, 3))
    w = rng.uniform(0, 1, (N, 3))
    grad = rng.standard_normal((N, 128))
    feats = rng.standard_normal((B * M, K, 128))
    return [
        ("fps_batch", f"B={B} N={N} m={M}", lambda be: kernels.fps_batch(pts, M, starts, backend=be)),
        ("knn_batch", f"B={B} N={N} q={M} k={K}", lambda be: kernels.knn_batch(pts, centers, K, backend=be)),
        ("scatter_rows", f"A={N} k=3 C=128", lambda be: kernels.scatter_rows(idx, w, grad, M, backend=be)),
        ("max_argmax", f"G={B * M} K={K} C=128", lambda be: kernels.max_argmax(feats, backend=be)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=1024)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"{'kernel':<14}{'shape':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, shape, fn in cases(args):
        a, b = fn("numpy"), fn("numba")
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            if not np.allclose(x, y, rtol=0, atol=1e-12):
                raise SystemExit(f"{name}: backends disagree")
        t_np = best_time(lambda: fn("numpy"), args.repeat)
        t_nb = best_time(lambda: fn("numba"), args.repeat)
        print(f"{name:<14}{shape:<26}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
