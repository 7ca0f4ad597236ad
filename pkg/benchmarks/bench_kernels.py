"""Compare the compiled LSTM kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--hidden 64] [--batch 32] [--steps 35] [--repeat 5]

Times one forward and one backward pass of a single layer at the training
shapes, checks the two backends agree, and prints a small table.
"""
import argparse
import time

import numpy as np

from numunits.kernels import backends


def _buffers(T, B, H, rng):
    gx = rng.normal(0, 0.5, (T, B, 4 * H))
    w_h = rng.uniform(-1 / np.sqrt(H), 1 / np.sqrt(H), (4 * H, H))
    h0 = rng.normal(0, 0.1, (B, H))
    c0 = rng.normal(0, 0.1, (B, H))
    return gx, w_h, h0, c0


def run_once(mod, gx, w_h, h0, c0):
    T, B, G = gx.shape
    H = G // 4
    keep = np.ones(H)
    gates = np.empty((T, B, G))
    c = np.empty((T, B, H))
    h = np.empty((T, B, H))
    t0 = time.perf_counter()
    mod.lstm_forward(gx, w_h, h0.copy(), c0.copy(), keep, keep, gates, c, h)
    t1 = time.perf_counter()
    dh = np.ones((T, B, H))
    dgates = np.empty_like(gates)
    dh0 = np.empty((B, H))
    dc0 = np.empty((B, H))
    mod.lstm_backward(dh, w_h, gates, c, c0, keep, keep, dgates, dh0, dc0)
    t2 = time.perf_counter()
    return t1 - t0, t2 - t1, h, dgates


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--steps", type=int, default=35)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    bufs = _buffers(args.steps, args.batch, args.hidden, np.random.default_rng(args.seed))
    results = {}
    for name, mod in backends().items():
        fwd, bwd = [], []
        for _ in range(args.repeat):
            f, b, h, dg = run_once(mod, *bufs)
            fwd.append(f)
            bwd.append(b)
        results[name] = (min(fwd), min(bwd), h, dg)

    print(f"T={args.steps} B={args.batch} H={args.hidden}, best of {args.repeat}")
    print(f"{'backend':<8} {'forward ms':>11} {'backward ms':>12}")
    for name, (f, b, _, _) in results.items():
        print(f"{name:<8} {1e3 * f:11.3f} {1e3 * b:12.3f}")
    if "cython" in results:
        py, cy = results["python"], results["cython"]
        err = max(np.abs(py[2] - cy[2]).max(), np.abs(py[3] - cy[3]).max())
        print(f"speedup  forward x{py[0] / cy[0]:.1f}  backward x{py[1] / cy[1]:.1f}  max abs diff {err:.1e}")
    else:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
