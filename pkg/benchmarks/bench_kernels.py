"""Compiled core vs numpy fallback on the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json]

Each case runs under both backends, reports the best-of-N time per call and
checks that both backends produce identical bytes.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from dynlora import linalg, switching
from dynlora.gating import GatingDecision
from dynlora.model import ModelConfig, generate, randomize_up_factors


def _matvec(rng, n):
    a, x = rng.standard_normal((n, n)), rng.standard_normal((n, 1))
    return lambda: linalg.matmul(a, x)


def _matmul(rng, n):
    a, b = rng.standard_normal((n, n)), rng.standard_normal((n, n))
    return lambda: linalg.matmul(a, b)


def _accumulate(rng, n, r):
    t = rng.standard_normal((n, n))
    u, d = rng.standard_normal((n, r)), rng.standard_normal((r, n))

    def run():
        w = t.copy()
        linalg.accumulate(w, u, d, 1)
        return w

    return run


def _sgmm(seed):
    model = generate(ModelConfig(seed=seed))
    randomize_up_factors(model, seed + 1)
    prev = GatingDecision((0, 1), (0.6, 0.4), 0)
    cur = GatingDecision((2, 3), (0.7, 0.3), 1)
    sites = model.adapted_sites()
    fused = switching.fused_delta(sites, prev, cur, model.config.scale)
    pristine = [s.weight.copy() for s in sites]

    def run():
        for s, w in zip(sites, pristine):
            np.copyto(s.weight, w)
        switching.sgmm(sites, fused)
        return np.concatenate([s.weight.ravel() for s in sites])

    return run, fused.flops


def cases(seed: int):
    rng = np.random.default_rng(seed)
    sg, sg_flops = _sgmm(seed)
    return [
        ("matvec 64", _matvec(rng, 64), 2 * 64 * 64),
        ("matvec 128", _matvec(rng, 128), 2 * 128 * 128),
        ("matmul 64", _matmul(rng, 64), 2 * 64**3),
        ("accumulate 128 r32", _accumulate(rng, 128, 32), 2 * 128 * 128 * 32),
        ("sgmm default model", sg, sg_flops),
    ]


def best_us(fn, repeat: int) -> float:
    number = max(1, int(0.02 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e6


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    backends = linalg.available_backends()
    if "compiled" not in backends:
        print("compiled kernels are not built; only the fallback can be timed", file=sys.stderr)
    rows = []
    for name, fn, flops in cases(args.seed):
        row = {"case": name, "flops": flops}
        outs = {}
        for b in backends:
            with linalg.using_backend(b):
                outs[b] = fn().tobytes()
                row[f"{b}_us"] = round(best_us(fn, args.repeat), 2)
        if len(outs) == 2:
            row["speedup"] = round(row["python_us"] / row["compiled_us"], 1)
            row["identical"] = outs["compiled"] == outs["python"]
        rows.append(row)

    if args.json:
        print(json.dumps(rows, indent=2))
        return 0
    cols = list(rows[0])
    widths = [max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(str(r.get(c, "")).ljust(w) for c, w in zip(cols, widths)))
    return 0 if all(r.get("identical", True) for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
