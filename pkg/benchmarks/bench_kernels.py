"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel and shape with the median time of each backend
and the speed-up. Exits with a message if the extension is not built.
"""

import argparse
import timeit

import numpy as np

from robusteval import _kernels_py

try:
    from robusteval import _kernels
except ImportError:  # pragma: no cover
    _kernels = None

SHAPES = [(64, 4, 28, 28), (256, 8, 14, 14)]


def cases(shape, rng):
    n, c, h, w = shape
    x = rng.standard_normal(shape)
    k = 3
    cols = _kernels_py.im2col(x, k)
    y, routing = _kernels_py.maxpool_forward(x, 2, 2, 2, 2)
    gy = rng.standard_normal(y.shape)
    return {
        "maxpool_forward": lambda m: m.maxpool_forward(x, 2, 2, 2, 2),
        "maxpool_backward_exact": lambda m: m.maxpool_backward_exact(gy, routing, h, w),
        "maxpool_backward_soft": lambda m: m.maxpool_backward_soft(x, gy, 2, 2, 2, 2, 0.1),
        "im2col": lambda m: m.im2col(x, k),
        "col2im": lambda m: m.col2im(cols, c, h, w, k),
    }


def median_time(fn, repeat):
    fn()
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    args = parser.parse_args()
    if _kernels is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'shape':<20}{'cython ms':>11}{'python ms':>11}{'speed-up':>10}")
    for shape in SHAPES:
        for name, call in cases(shape, rng).items():
            fast = median_time(lambda: call(_kernels), args.repeat)
            slow = median_time(lambda: call(_kernels_py), args.repeat)
            print(f"{name:<24}{str(shape):<20}{fast * 1e3:>11.3f}{slow * 1e3:>11.3f}{slow / fast:>9.1f}x")


if __name__ == "__main__":
    main()
