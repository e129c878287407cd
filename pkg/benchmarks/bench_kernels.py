"""Compare the compiled row kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--rows 4096] [--cols 64] [--repeat 20]

Prints per-kernel median wall time for each backend, the speedup, and the
max absolute difference between the two outputs.
"""
import argparse
import statistics
import time

import numpy as np

from magicnav.kernels import get_backend


def _time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _cases(rows, cols, rng):
    x = rng.standard_normal((rows, cols))
    mask = (rng.random((rows, cols)) > 0.2).astype(np.uint8)
    mask[:, 0] = 1
    g = rng.standard_normal((rows, cols))
    gain, bias = rng.standard_normal(cols), rng.standard_normal(cols)

    def args(k):
        y = k.softmax_fwd(x, mask)
        out, xhat, rstd = k.layer_norm_fwd(x, gain, bias, 1e-5)
        return {
            "softmax_fwd": lambda: k.softmax_fwd(x, mask),
            "softmax_bwd": lambda: k.softmax_bwd(y, g),
            "layer_norm_fwd": lambda: k.layer_norm_fwd(x, gain, bias, 1e-5),
            "layer_norm_bwd": lambda: k.layer_norm_bwd(g, xhat, rstd, gain),
        }
    return args


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    make = _cases(args.rows, args.cols, np.random.default_rng(args.seed))
    py = make(get_backend("python"))
    try:
        cy = make(get_backend("cython"))
    except ImportError:
        print("compiled extension not built; run `python setup.py build_ext --inplace`")
        cy = None

    print(f"{'kernel':<16}{'python ms':>12}{'cython ms':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, fn in py.items():
        tp = _time(fn, args.repeat) * 1e3
        if cy is None:
            print(f"{name:<16}{tp:>12.3f}{'-':>12}{'-':>10}{'-':>14}")
            continue
        tc = _time(cy[name], args.repeat) * 1e3
        diff = float(np.max(np.abs(_first(fn()) - _first(cy[name]()))))
        print(f"{name:<16}{tp:>12.3f}{tc:>12.3f}{tp / tc:>10.2f}{diff:>14.2e}")


if __name__ == "__main__":
    main()
