"""Compare the compiled and numpy backends of the elliptic-beam kernel.

Usage::

    python benchmarks/bench_kernels.py [--sizes 1000 100000 1000000] [--repeat 5]

Inputs are realistic beam draws at the 3.5 km preset. Each timing is the
best of ``--repeat`` runs.
"""
from __future__ import annotations

import argparse
import math
import timeit

import numpy as np

from fscvqkd import _beam
from fscvqkd.channel import TurbulenceParams, turbulence_statistics

try:
    from fscvqkd import _beam_ext
except ImportError:
    _beam_ext = None


def make_inputs(n: int, seed: int = 0) -> tuple:
    p = TurbulenceParams(distance=3500.0)
    mean, cov = turbulence_statistics(p)
    rng = np.random.default_rng(seed)
    beams = mean + rng.standard_normal((n, 4)) @ np.linalg.cholesky(cov).T
    phi = rng.uniform(0.0, math.pi / 2, n)
    return (beams[:, 0], beams[:, 1], beams[:, 2], beams[:, 3], phi, p.w0, p.aperture)


def best_time(fn, args, repeat: int) -> float:
    number = 1
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1_000, 100_000, 1_000_000])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = {"numpy": _beam.aperture_transmissivity}
    if _beam_ext is not None:
        backends["cython"] = _beam_ext.aperture_transmissivity
    else:
        print("compiled extension not built; timing numpy only")

    print(f"{'n':>10} " + " ".join(f"{name + ' (s)':>12}" for name in backends)
          + (f" {'speedup':>8} {'max |diff|':>11}" if len(backends) == 2 else ""))
    for n in args.sizes:
        inputs = make_inputs(n)
        times = {name: best_time(fn, inputs, args.repeat) for name, fn in backends.items()}
        line = f"{n:>10} " + " ".join(f"{t:>12.4g}" for t in times.values())
        if len(backends) == 2:
            diff = np.max(np.abs(backends["numpy"](*inputs) - backends["cython"](*inputs)))
            line += f" {times['numpy'] / times['cython']:>8.2f} {diff:>11.2e}"
        print(line)


if __name__ == "__main__":
    main()
