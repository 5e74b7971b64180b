#!/usr/bin/env python3
"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--size 64] [--json out.json]

Both backends must produce bit-identical output; the script checks that
before reporting timings.
"""
import argparse
import json
import statistics
import sys
import time

import numpy as np

from emsubspace import _pykernels
from emsubspace.motion import SolverSpec, estimate_field, shifted_sequence

try:
    from emsubspace import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), statistics.median(times), out


def bench_field(size, solver, repeat):
    frames, _ = shifted_sequence((0.5, 0.25), height=size, width=size, seed=1, snr_db=20.0,
                                 method="bilinear")
    spec = SolverSpec(kind=solver)
    rows = []
    outs = {}
    for name in ("python", "cython"):
        if name == "cython" and _ckernels is None:
            continue
        best, med, fld = best_of(lambda: estimate_field(frames[0], frames[1], spec=spec,
                                                        backend=name), repeat)
        outs[name] = fld
        rows.append({"kernel": f"estimate_field/{solver}", "size": f"{size}x{size}",
                     "backend": name, "best_s": best, "median_s": med})
    if len(outs) == 2:
        same = np.array_equal(outs["python"].vectors, outs["cython"].vectors)
        for r in rows:
            r["identical"] = bool(same)
    return rows


def bench_jacobi(n, repeat):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((n, n))
    s = a @ a.T
    rows = []
    outs = {}
    for name, mod in (("python", _pykernels), ("cython", _ckernels)):
        if mod is None:
            continue

        def once():
            w = np.ascontiguousarray(s.copy())
            v = np.ascontiguousarray(np.eye(n))
            mod.jacobi_sweeps(w, v, 100, 1e-14)
            return w, v

        best, med, out = best_of(once, repeat)
        outs[name] = out
        rows.append({"kernel": "jacobi", "size": f"{n}x{n}", "backend": name,
                     "best_s": best, "median_s": med})
    if len(outs) == 2:
        same = all(np.array_equal(x, y) for x, y in zip(outs["python"], outs["cython"]))
        for r in rows:
            r["identical"] = bool(same)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--size", type=int, default=64, help="frame edge length")
    ap.add_argument("--jacobi-n", type=int, nargs="+", default=[10, 30, 60])
    ap.add_argument("--json", help="also write the rows here")
    args = ap.parse_args(argv)

    if _ckernels is None:
        print("compiled kernels not built; timing the Python backend only", file=sys.stderr)
    rows = []
    for solver in ("ols", "rls", "pcr1", "pcr2"):
        rows += bench_field(args.size, solver, args.repeat)
    for n in args.jacobi_n:
        rows += bench_jacobi(n, args.repeat)

    print(f"{'kernel':<24}{'size':>9}{'backend':>9}{'best [s]':>12}{'median [s]':>12}{'identical':>11}")
    for r in rows:
        print(f"{r['kernel']:<24}{r['size']:>9}{r['backend']:>9}{r['best_s']:>12.5f}"
              f"{r['median_s']:>12.5f}{str(r.get('identical', '-')):>11}")
    by_key = {}
    for r in rows:
        by_key.setdefault((r["kernel"], r["size"]), {})[r["backend"]] = r["best_s"]
    print()
    for (kernel, size), t in by_key.items():
        if "python" in t and "cython" in t and t["cython"] > 0:
            print(f"speedup {kernel} {size}: {t['python'] / t['cython']:.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    if any(r.get("identical") is False for r in rows):
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
