"""Compare the numba and pure-numpy kernel backends on training-sized batches.

    python benchmarks/bench_kernels.py [--points 8192] [--repeat 5]

Prints the best-of-N wall time per kernel and the numpy/numba ratio. Both
backends are checked for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from mfnerf import kernels
from mfnerf.encoding import encode, encode_backward, init_tables
from mfnerf.grid import EncodingConfig
from mfnerf.renderer import composite, composite_backward
from mfnerf.trainer import TrainConfig, adam_step


def workloads(n_points, samples_per_ray=64):
    rng = np.random.default_rng(0)
    enc = EncodingConfig(L=16, N=8, T=2**19, F=2)
    bank = init_tables(enc, 0)
    x = rng.random((n_points, 3))
    dy = rng.standard_normal((n_points, enc.L * enc.F)).astype(np.float32)
    _, cache = encode(x, bank, return_cache=True)

    n_rays = max(1, n_points // samples_per_ray)
    counts = np.full(n_rays, samples_per_ray)
    S = counts.sum()
    sigma = rng.exponential(2.0, S).astype(np.float32)
    rgb = rng.random((S, 3)).astype(np.float32)
    delta = np.full(S, 1.0 / samples_per_ray, np.float32)
    dcolor = rng.standard_normal((n_rays, 3)).astype(np.float32)

    cfg = TrainConfig()
    m, v = np.zeros_like(bank.params), np.zeros_like(bank.params)
    grads = rng.standard_normal(bank.params.shape).astype(np.float32)
    rows = np.unique(cache.index.ravel())

    def run_backward():
        bank.zero_grad()
        encode_backward(x, bank, dy, cache)

    return {
        "encode forward": lambda: encode(x, bank),
        "encode backward": run_backward,
        "composite forward": lambda: composite(sigma, rgb, delta, counts),
        "composite backward": lambda: composite_backward(sigma, rgb, delta, counts, dcolor),
        "sparse adam": lambda: adam_step(bank.params, grads, m, v, 1e-3, 10, cfg, rows=rows),
    }


def check_agreement(n_points):
    outs = {}
    for name in ("numpy", "numba"):
        kernels.set_backend(name)
        w = workloads(n_points)
        outs[name] = [np.asarray(w["encode forward"]()), w["composite forward"]().color]
    for a, b in zip(outs["numpy"], outs["numba"]):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=8192)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    check_agreement(min(args.points, 2048))
    times = {}
    for name in ("numba", "numpy"):
        kernels.set_backend(name)
        w = workloads(args.points)
        for fn in w.values():  # compile / warm caches
            fn()
        times[name] = {k: min(timeit.repeat(fn, number=1, repeat=args.repeat)) for k, fn in w.items()}

    print(f"{args.points} sample points, best of {args.repeat}")
    print(f"{'kernel':<20}{'numba ms':>10}{'numpy ms':>10}{'ratio':>8}")
    for k in times["numba"]:
        a, b = times["numba"][k] * 1e3, times["numpy"][k] * 1e3
        print(f"{k:<20}{a:>10.2f}{b:>10.2f}{b / a:>8.1f}")


if __name__ == "__main__":
    main()
