"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is warmed up once per backend (numba compiles on first call),
then timed with ``timeit``; outputs are compared so a speedup never hides a
wrong answer.
"""

import argparse
import timeit

import numpy as np

from cvae import kernels
from cvae._accel import HAVE_NUMBA, use_backend
from cvae.evaluate import silhouette_score


def _cases(rng):
    pts = rng.standard_normal((3000, 2))
    codes = rng.integers(0, 3, 3000)
    lattices = rng.uniform(-1, 1, (2000, 15, 15))
    param = rng.standard_normal((784, 128))
    grad = rng.standard_normal((784, 128))

    def adam():
        p, m, v = param.copy(), np.zeros_like(param), np.zeros_like(param)
        for step in range(1, 11):
            kernels.adam_update(p, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, step)
        return p

    return {
        "label_distance_sums n=3000": lambda: kernels.label_distance_sums(pts, codes, 3),
        "silhouette_score n=3000": lambda: silhouette_score(pts, codes),
        "lattice_upsample 2000x15x15": lambda: kernels.lattice_upsample(lattices, 28, 28),
        "adam_update 10 steps 784x128": adam,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    backends = ("numpy", "numba")
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  max|diff|")
    for name in _cases(np.random.default_rng(0)):
        best, outputs = {}, {}
        for b in backends:
            fn = _cases(np.random.default_rng(0))[name]
            with use_backend(b):
                outputs[b] = np.asarray(fn())
                best[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(outputs["numpy"] - outputs["numba"])))
        print(f"{name:32s} {best['numpy']:10.2f} {best['numba']:10.2f} {best['numpy'] / best['numba']:7.1f}x  {diff:.2e}")


if __name__ == "__main__":
    main()
