"""Time the compiled kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from modiqa import _kernels_py

try:
    from modiqa import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng):
    x = rng.standard_normal(2000)
    y = x + rng.standard_normal(2000)
    img = rng.standard_normal((512, 512))
    pred = rng.standard_normal(256)
    target = rng.random(256)
    return {
        "kendall_counts n=2000": ("kendall_counts", (x, y)),
        "box_mean 512x512 p=16": ("box_mean", (img, 16)),
        "pairwise_rank n=256": ("pairwise_rank", (pred, target, 1e-6)),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':26s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for label, (name, inputs) in cases(rng).items():
        py = getattr(_kernels_py, name)
        t_py = min(timeit.repeat(lambda: py(*inputs), number=1, repeat=args.repeat)) * 1e3
        if _kernels is None:
            print(f"{label:26s} {t_py:10.2f} {'n/a':>10s} {'n/a':>8s}")
            continue
        cy = getattr(_kernels, name)
        t_cy = min(timeit.repeat(lambda: cy(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:26s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
