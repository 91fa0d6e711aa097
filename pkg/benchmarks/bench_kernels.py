"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Covers the calls that dominate sampling (single-row and batched network
evaluation) and evaluation (the all-pairs distance sums).
"""

import argparse
import timeit

import numpy as np

from dfm import kernels
from dfm.kernels import _pykernels
from dfm.net import NetConfig, NetParams


def _net_args(rng, batch, hidden=64):
    p = NetParams.init(NetConfig(d=2, hidden=hidden, depth=4), 0)
    blk = p.block(0)
    h = rng.standard_normal((batch, hidden))
    cvec = rng.standard_normal((batch, hidden))
    return (h, cvec, blk["mod_w"], blk["mod_b"], blk["fc1_w"], blk["fc1_b"], blk["fc2_w"], blk["fc2_b"])


def cases(rng):
    a1 = _net_args(rng, 1)
    a64 = _net_args(rng, 64)
    x = rng.standard_normal((1, 64))
    w, b = rng.standard_normal((64, 2)), rng.standard_normal(2)
    pts = rng.standard_normal((512, 2))
    other = rng.standard_normal((512, 2))
    return [
        ("dense_rows B=1", lambda m: m.dense_rows(x, w, b)),
        ("adaln_rows B=1", lambda m: m.adaln_rows(*a1)),
        ("adaln_rows B=64", lambda m: m.adaln_rows(*a64)),
        ("pair_sum_l1 n=512", lambda m: m.pair_sum_l1(pts)),
        ("pair_sum_euclid n=512", lambda m: m.pair_sum_euclid(pts)),
        ("cross_sum_euclid 512x512", lambda m: m.cross_sum_euclid(pts, other)),
    ]


def best_time(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        print("compiled extension not built; only the numpy fallback is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for name, call in cases(rng):
        t_py = best_time(lambda: call(_pykernels), args.repeat)
        t_c = best_time(lambda: call(kernels.compiled), args.repeat)
        print(f"{name:28s} {t_py * 1e6:12.1f} {t_c * 1e6:12.1f} {t_py / t_c:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
