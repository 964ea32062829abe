"""Compiled kernels against the pure-Python fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each kernel is
timed on identical inputs for every importable backend, and the outputs are
checked for equality before any number is printed.
"""

import argparse
import time

import numpy as np

from uvc import kernels
from uvc.bitstream import Contexts
from uvc.transform import program


def _best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_lifting(mod, rng_seed=0):
    rng = np.random.default_rng(rng_seed)
    ops = program(32).ops
    data = rng.integers(-510, 511, (2048, 32)).astype(np.int64)

    def run():
        x = data.copy()
        mod.lift_forward(x, ops)
        mod.lift_inverse(x, ops)
        return x

    return "lifting 2048 rows x 32, forward+inverse", run


def bench_integrals(mod, rng_seed=1):
    rng = np.random.default_rng(rng_seed)
    cur = rng.integers(0, 256, (64, 64)).astype(np.int32)
    ref = rng.integers(0, 256, (64 + 16, 64 + 16)).astype(np.int32)
    return "SAD tables, 64x64 block, range 8", lambda: np.asarray(mod.error_integrals(cur, ref, 8, False))


def bench_coder(mod, rng_seed=2):
    rng = np.random.default_rng(rng_seed)
    bins = (rng.random(100_000) < 0.15).astype(np.int64).tolist()
    idx = rng.integers(0, Contexts.COUNT, 100_000).tolist()

    def run():
        ctx = Contexts.fresh()
        enc = mod.ArithEncoder()
        for b, i in zip(bins, idx):
            enc.encode_bin(ctx, i, b)
        return enc.finish()

    return "range coder, 1e5 context bins", run


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3, help="timed runs per kernel (best is kept)")
    args = parser.parse_args(argv)
    backends = kernels.backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'kernel':<42}" + "".join(f"{name:>12}" for name in backends) + f"{'speed-up':>10}")
    for make in (bench_lifting, bench_integrals, bench_coder):
        times, outs, label = {}, {}, ""
        for name, mod in backends.items():
            label, fn = make(mod)
            times[name], outs[name] = _best_of(fn, args.repeat)
        ref = outs["python"]
        for name, out in outs.items():
            same = out == ref if isinstance(ref, bytes) else np.array_equal(out, ref)
            if not same:
                raise SystemExit(f"{label}: {name} output differs from the fallback")
        ratio = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{label:<42}" + "".join(f"{t * 1e3:10.2f}ms" for t in times.values()) + f"{ratio:9.1f}x")


if __name__ == "__main__":
    main()
