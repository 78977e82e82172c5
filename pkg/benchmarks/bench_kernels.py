"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both implementations are called directly, so the environment flag does not
matter here. The first numba call (compilation or cache load) is excluded.
"""

import argparse
import timeit

import numpy as np

from univip import kernels as k


def _segment_inputs(rng, side=64):
    n = side * side
    idx = np.arange(n).reshape(side, side)
    ea = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    eb = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    ew = rng.random(ea.size) * 50
    order = np.argsort(ew, kind="stable")
    return n, ea[order], eb[order], ew[order]


def cases(rng):
    x = rng.random((64, 16, 24, 24))
    cols = k._im2col_numpy(x, 3, 3, 2, 1)
    n, ea, eb, ew = _segment_inputs(rng)
    C = rng.random((8, 8))
    a = np.full(8, 1 / 8)
    la = np.log(a)
    return {
        "im2col 64x16x24x24": (lambda: k._im2col_numpy(x, 3, 3, 2, 1),
                               lambda: k._im2col_numba(x, 3, 3, 2, 1)),
        "col2im 64x16x24x24": (lambda: k._col2im_numpy(cols, x.shape, 3, 3, 2, 1),
                               lambda: k._col2im_numba(cols, x.shape, 3, 3, 2, 1)),
        "segment 64x64 grid": (lambda: k._segment_python(n, ea, eb, ew, 20.0, 8),
                               lambda: k._segment_loops(n, ea, eb, ew, 20.0, 8)),
        "sinkhorn K=8 eps=0.05": (lambda: k._sinkhorn_numpy(C, la, la, 0.05, 2000, 1e-6),
                                  lambda: k._sinkhorn_loops(C, la, la, 0.05, 2000, 1e-6)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not k._HAVE_NUMBA:
        raise SystemExit("numba is not importable")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (np_fn, nb_fn) in cases(rng).items():
        nb_fn()  # warm-up / compile
        t_np = min(timeit.repeat(np_fn, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(nb_fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
