"""Compiled vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Both backends are imported side by side; outputs are compared before timing.
"""
import argparse
import sys
import timeit

import numpy as np

from ftrobust import _pykernels as python

try:
    from ftrobust import _kernels as compiled
except ImportError:
    sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")


def cases(quick: bool):
    rng = np.random.default_rng(0)
    scale = 0.1 if quick else 1.0
    n_mc = int(200_000 * scale)
    x = rng.standard_normal((int(4096 * scale), 64))
    gain, bias = rng.standard_normal(64), rng.standard_normal(64)
    g = rng.standard_normal(x.shape)
    _, xhat, inv = python.layer_norm_fwd(x, gain, bias, 1e-5)
    w = np.concatenate([[0.0], np.ones(200) / 200])
    acc, rob = rng.uniform(0, 1, 20_000), rng.uniform(0, 1, 20_000)
    mask = python.pareto_mask(acc, rob)
    fa, fr = acc[mask], rob[mask]
    order = np.argsort(fa)
    fa, fr = fa[order], fr[order]
    return {
        "gelu_fwd [4096x64]": lambda k: k.gelu_fwd(x),
        "layer_norm_fwd [4096x64]": lambda k: k.layer_norm_fwd(x, gain, bias, 1e-5),
        "layer_norm_bwd [4096x64]": lambda k: k.layer_norm_bwd(g, xhat, inv, gain),
        f"gaussian_linear_mc [n={n_mc}, d=200]":
            lambda k: k.gaussian_linear_mc(np.random.default_rng(1), w, 0.2, 0.95, n_mc),
        "pareto_mask [20000 pts]": lambda k: k.pareto_mask(acc, rob),
        f"frontier_auc [{len(fa)} pts]": lambda k: k.frontier_auc(fa, fr),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="10x smaller inputs")
    args = ap.parse_args()
    print(f"{'kernel':40s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, call in cases(args.quick).items():
        if not same(call(python), call(compiled)):
            sys.exit(f"{name}: backends disagree")
        t_py = min(timeit.repeat(lambda: call(python), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: call(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:40s} {t_py:10.2f} {t_c:12.2f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
