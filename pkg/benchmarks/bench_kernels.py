"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both implementations are called directly, so the ``LENSLESS_DATASET_NUMBA``
switch does not matter here.  The first numba call (compilation) is excluded.
"""
import argparse
import timeit

import numpy as np

from lensless_dataset import _kernels


def cases(rng):
    img = rng.random((300, 300, 1))
    g = np.array([[1.01, 0.02, -1.5], [-0.01, 0.98, 2.2], [1e-5, 0, 1.0]])
    xs = rng.uniform(-2, 302, 300 * 300)
    ys = rng.uniform(-2, 302, 300 * 300)
    xd = rng.uniform(-0.6, 0.6, 300 * 300)
    yd = rng.uniform(-0.6, 0.6, 300 * 300)
    ac = rng.random((127, 127))
    return {
        "bilinear_sample": (img, xs, ys),
        "warp_homography": (img, g, 300, 300),
        "undistort_normalized": (xd, yd, -0.08, 0.01, 0.0, 0.0, 0.0, 20, 1e-9),
        "radial_bins": (ac, 63.0, 63.0, 1.0, 90),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels.numba_impl is None:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, a in cases(np.random.default_rng(0)).items():
        np_fn, nb_fn = _kernels.numpy_impl[name], _kernels.numba_impl[name]
        nb_fn(*a)  # compile
        t_np = min(timeit.repeat(lambda: np_fn(*a), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: nb_fn(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:24s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
