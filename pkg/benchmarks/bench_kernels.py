"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Inputs use the reference layout (128-step windows, 6 channels, 196
filters of width 16). Numba compile time is paid in a warmup call and not
counted. Also prints the max abs difference between the two backends.
"""
import argparse
import statistics
import time

import numpy as np

from fedsim.kernels import _numba, _numpy


def cases(rng, scale):
    n = max(1, int(64 * scale))
    x = rng.normal(size=(n, 6, 128))
    w = rng.normal(size=(196, 6, 16)) * 0.1
    b = rng.normal(size=196)
    conv = _numpy.conv1d_forward(x, w, b)
    pooled, idx = _numpy.maxpool1d_forward(conv, 4)
    grad = rng.normal(size=conv.shape)
    k = max(2, int(15 * scale))
    ref = rng.normal(size=(196, 97))
    stacked = ref + rng.normal(scale=0.1, size=(k, 196, 97))
    cost_a = rng.normal(size=(196, 97))
    cost = rng.uniform(size=(64, 64))
    return {
        "conv1d_forward": lambda m: m.conv1d_forward(x, w, b),
        "conv1d_backward": lambda m: m.conv1d_backward(x, w, grad),
        "maxpool1d_forward": lambda m: m.maxpool1d_forward(conv, 4),
        "maxpool1d_backward": lambda m: m.maxpool1d_backward(np.ones_like(pooled), idx, 4, conv.shape[2]),
        "neuron_distances": lambda m: m.neuron_distances(ref, stacked),
        "cost_matrix": lambda m: m.cost_matrix(cost_a, ref),
        "linear_sum_assignment": lambda m: m.linear_sum_assignment(cost),
    }


def _flat(result):
    parts = result if isinstance(result, tuple) else (result,)
    return [np.asarray(p, dtype=np.float64) for p in parts if p is not None]


def timed(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--scale", type=float, default=1.0, help="multiplies batch and client counts")
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max diff':>12}")
    for name, call in cases(rng, args.scale).items():
        a, b = call(_numpy), call(_numba)  # warmup, includes jit compile
        diff = max((float(np.abs(p - q).max()) if p.size else 0.0) for p, q in zip(_flat(a), _flat(b)))
        t_np = timed(lambda: call(_numpy), args.repeat)
        t_nb = timed(lambda: call(_numba), args.repeat)
        print(f"{name:<24}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.2f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
