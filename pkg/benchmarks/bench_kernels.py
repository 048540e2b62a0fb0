"""Compare the numba and numpy frame-similarity kernels on frame-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--height 171] [--width 224]

Prints per-kernel median seconds for both backends, the speed-up, and the
largest absolute difference between their results.
"""

import argparse
import statistics
import time

import numpy as np

from dmskit import _kernels as k

KERNELS = {
    "rmse": (k.rmse_numba, k.rmse_numpy),
    "hist_intersection": (k.hist_intersection_numba, k.hist_intersection_numpy),
    "ssim": (k.ssim_numba, k.ssim_numpy),
}


def timed(fn, a, b, repeats):
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(a, b)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--height", type=int, default=171)
    p.add_argument("--width", type=int, default=224)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    rng = np.random.default_rng(args.seed)
    a = rng.integers(0, 256, (args.height, args.width), dtype=np.uint8)
    b = rng.integers(0, 256, (args.height, args.width), dtype=np.uint8)
    print(f"frames {args.height}x{args.width}, {args.repeats} repeats, active backend: {k.BACKEND}")
    print(f"{'kernel':<18}{'numba s':>12}{'numpy s':>12}{'speed-up':>10}{'max |diff|':>14}")
    for name, (fast, ref) in KERNELS.items():
        fast(a, b)  # compile outside the timed loop
        tf, tr = timed(fast, a, b, args.repeats), timed(ref, a, b, args.repeats)
        diff = abs(fast(a, b) - ref(a, b))
        print(f"{name:<18}{tf:>12.6f}{tr:>12.6f}{tr / tf:>9.1f}x{diff:>14.2e}")


if __name__ == "__main__":
    main()
