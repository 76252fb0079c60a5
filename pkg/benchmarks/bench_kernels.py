"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the median wall time per call for each kernel and backend, plus the
speedup, and checks that both backends return identical results.
"""

import argparse
import statistics
import time

import numpy as np

from lsnet import _pykernels

try:
    from lsnet import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _scene(rng, n, size):
    return rng.uniform(0, size, size=(n, 4))


def _cases(rng):
    size = 512
    segs = _scene(rng, 40, size)
    confs = rng.uniform(0, 1, size=len(segs))
    ends = rng.integers(0, size, size=(200, 4))
    clips = _scene(rng, 1000, 256)
    return {
        "encode_lattice (40 segs, 31x31)": (
            "encode_lattice", lambda k: k.encode_lattice(segs, 32, 16, 31, 31, 2.0)),
        "rasterize_max (40 segs, 512^2, W_l=2)": (
            "rasterize_max", lambda k: k.rasterize_max(segs, confs, size, size, 2)),
        "bresenham x200": (
            "bresenham", lambda k: [k.bresenham(*map(int, e)) for e in ends]),
        "clip_segment x1000": (
            "clip_segment", lambda k: [k.clip_segment(*s, 100.0, 100.0, 132.0, 132.0) for s in clips]),
    }


def _time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if a is None or b is None:
        return a is b
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not available; build with `pip install --no-build-isolation -e .`")
    print(f"{'kernel':<40} {'python ms':>10} {'cython ms':>10} {'speedup':>8}  identical")
    for name, (_, fn) in _cases(np.random.default_rng(args.seed)).items():
        t_py = _time(lambda: fn(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:<40} {t_py * 1e3:10.3f} {'n/a':>10} {'n/a':>8}  n/a")
            continue
        t_c = _time(lambda: fn(_ckernels), args.repeat)
        same = _same(fn(_pykernels), fn(_ckernels))
        print(f"{name:<40} {t_py * 1e3:10.3f} {t_c * 1e3:10.3f} {t_py / t_c:7.1f}x  {same}")


if __name__ == "__main__":
    main()
