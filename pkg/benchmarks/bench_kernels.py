"""Compare the compiled and pure-Python kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--paths 20000] [--steps 200] [--repeat 3]

For each kernel the script reports the best wall-clock time per backend,
the speed-up of the compiled extension and whether both backends return
identical arrays on the same inputs.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from clab.kernels import backends


def _best(fn, repeat: int) -> tuple[float, object]:
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_multilinear(mods: dict, points: int, repeat: int) -> dict:
    rng = np.random.default_rng(0)
    tab = rng.standard_normal((257, 257))
    pts = rng.uniform(-1, 1, (points, 2))
    res = {name: _best(lambda m=m: m.multilinear(tab, -1.0, 2 / 256, pts), repeat) for name, m in mods.items()}
    ref = res["python"][1]
    return {name: (t, bool(np.array_equal(out, ref))) for name, (t, out) in res.items()}


def bench_walk(mods: dict, paths: int, steps: int, repeat: int) -> dict:
    rng = np.random.default_rng(1)
    n = 2
    qtab = -np.abs(rng.standard_normal((257, 257)))
    incr = rng.standard_normal((paths, steps, n))
    expo = rng.standard_exponential((paths, steps, n))

    def once(m):
        state = (np.tile([0.3, 0.1], (paths, 1)), np.zeros(paths), np.ones(paths, np.uint8), np.full(paths, np.nan),
                 np.zeros(paths, np.uint8), np.full(paths, np.nan))
        m.walk_chunk(*state, incr, expo, 2.5e-4, 0.0, qtab, -1.0, 2 / 256, 1.0, np.zeros(n), 0.5, False)
        return state

    res = {name: _best(lambda m=m: once(m), repeat) for name, m in mods.items()}
    ref = res["python"][1]
    out = {}
    for name, (t, state) in res.items():
        same = all(np.array_equal(a, b, equal_nan=True) for a, b in zip(state, ref))
        out[name] = (t, same)
    return out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--points", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    mods = backends()
    if "cython" not in mods:
        print("compiled extension not built; only the Python backend is available")
    results = {
        f"multilinear ({args.points} points)": bench_multilinear(mods, args.points, args.repeat),
        f"walk_chunk ({args.paths} paths x {args.steps} steps)": bench_walk(mods, args.paths, args.steps, args.repeat),
    }
    print(f"{'kernel':45s} {'backend':8s} {'seconds':>10s} {'speed-up':>9s}  identical")
    for kernel, res in results.items():
        base = res["python"][0]
        for name, (t, same) in res.items():
            print(f"{kernel:45s} {name:8s} {t:10.4f} {base / t:9.1f}  {same}")


if __name__ == "__main__":
    main()
