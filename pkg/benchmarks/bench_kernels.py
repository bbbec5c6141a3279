"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json]

Each case runs on both backends with identical inputs; the table reports the
best-of-``repeat`` wall time, the speedup and the max absolute difference
between the two outputs.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from merv.numerics import kernels


def _cases(rng):
    # one encoder feature at the default geometry, pooled 16x16 -> 8x8 per frame
    feat = rng.standard_normal((16, 16, 16, 1024)).astype(np.float32)
    grad = rng.standard_normal((16, 8, 8, 1024)).astype(np.float32)
    # uneven windows (14 -> 8) hit the overlapping-window path
    vivit = rng.standard_normal((16, 14, 14, 768)).astype(np.float32)
    f64 = rng.standard_normal((8, 16, 16, 64))
    return {
        "pool_fwd 16x16x16x1024 -> 16x8x8": lambda k: k.pool_forward(feat, 16, 8, 8),
        "pool_fwd 16x14x14x768 -> 16x8x8": lambda k: k.pool_forward(vivit, 16, 8, 8),
        "pool_fwd f64 8x16x16x64 -> 4x4x4": lambda k: k.pool_forward(f64, 4, 4, 4),
        "pool_bwd 16x8x8x1024 -> 16x16x16": lambda k: k.pool_backward(grad, 16, 16, 16),
    }


def run(repeat=5, seed=0):
    found = kernels.backends()
    cases = _cases(np.random.default_rng(seed))
    rows = []
    for name, fn in cases.items():
        row = {"case": name}
        outs = {}
        for backend, mod in found.items():
            outs[backend] = fn(mod)
            row[backend] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat))
        if "cython" in row:
            row["speedup"] = row["numpy"] / row["cython"]
            row["max_abs_diff"] = float(np.max(np.abs(outs["cython"].astype(np.float64) - outs["numpy"])))
        rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    rows = run(args.repeat)
    if args.json:
        print(json.dumps({"active": kernels.BACKEND, "rows": rows}, indent=2))
        return 0
    print(f"active backend: {kernels.BACKEND}")
    if "cython" not in kernels.backends():
        print("compiled extension not available; numpy timings only")
    print(f"{'case':<36} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for r in rows:
        cy = f"{r['cython'] * 1e3:10.2f}" if "cython" in r else f"{'-':>10}"
        sp = f"{r['speedup']:8.1f}" if "speedup" in r else f"{'-':>8}"
        diff = f"{r['max_abs_diff']:11.2e}" if "max_abs_diff" in r else f"{'-':>11}"
        print(f"{r['case']:<36} {r['numpy'] * 1e3:10.2f} {cy} {sp} {diff}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
