"""Time the Cython kernels against the NumPy fallback.

Run from the repository root after building the extension::

    python3 benchmarks/bench_kernels.py --size 20000 --repeat 5

Each kernel is called on the same inputs with both backends; the table
reports the best wall time per call, the speedup and the largest
difference between the two outputs, relative to ``max(1, |value|)``.
"""

import argparse
import timeit

import numpy as np

from mortgap import _kernels_py

try:
    from mortgap import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def _inputs(size: int, seed: int):
    rng = np.random.default_rng(seed)
    lam1 = 10 ** rng.uniform(-1, 5, size)
    lam2 = 10 ** rng.uniform(-1, 5, size)
    z = np.rint(lam1 - lam2 + rng.normal(0, 1, size) * np.sqrt(lam1 + lam2)).astype(np.int64)
    n = np.abs(z).astype(float)
    v = 2.0 * np.sqrt(lam1 * lam2)
    # bivariate Poisson cells at the scale of death counts
    x = rng.poisson(300, size).astype(np.int64)
    y = rng.poisson(250, size).astype(np.int64)
    log_theta = np.log(rng.uniform(0.01, 1.0, size))
    k = rng.poisson(lam1).astype(np.int64)
    return {
        "log_ive": (n, v),
        "skellam_logpmf_grad": (z, lam1, lam2),
        "bp_inner": (x, y, log_theta),
        "log_poisson": (k, lam1),
    }


def _max_rel_diff(a, b) -> float:
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    out = 0.0
    for u, w in zip(a, b):
        u, w = np.asarray(u, dtype=float), np.asarray(w, dtype=float)
        both = np.isfinite(u) & np.isfinite(w)
        if both.any():
            out = max(out, float(np.max(np.abs(u[both] - w[both]) / np.maximum(1.0, np.abs(w[both])))))
    return out


def run(size: int, repeat: int, seed: int) -> list[tuple]:
    rows = []
    for name, args in _inputs(size, seed).items():
        py = getattr(_kernels_py, name)
        t_py = min(timeit.repeat(lambda: py(*args), number=1, repeat=repeat))
        if _kernels_c is None:
            rows.append((name, t_py, float("nan"), float("nan"), float("nan")))
            continue
        cy = getattr(_kernels_c, name)
        t_cy = min(timeit.repeat(lambda: cy(*args), number=1, repeat=repeat))
        rows.append((name, t_py, t_cy, t_py / t_cy, _max_rel_diff(py(*args), cy(*args))))
    return rows


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=20000, help="elements per call")
    parser.add_argument("--repeat", type=int, default=5, help="timing repeats; the best is kept")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _kernels_c is None:
        print("Cython extension not built; timing the NumPy backend only")
    print(f"{args.size} elements per call, best of {args.repeat}")
    print(f"{'kernel':<22}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}{'max rel diff':>14}")
    for name, t_py, t_cy, speed, diff in run(args.size, args.repeat, args.seed):
        print(f"{name:<22}{1e3 * t_py:>10.2f}{1e3 * t_cy:>11.2f}{speed:>9.1f}{diff:>14.2e}")


if __name__ == "__main__":
    main()
