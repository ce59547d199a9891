"""Numba kernels against their numpy fallbacks, then the whole backbone.

    python3 benchmarks/bench_kernels.py [--T 2304] [--C 64] [--iters 50] [--csv out.csv]

Kernel rows call both implementations in-process.  The backbone row runs the
Parallel stem + pyramid in two subprocesses, one per value of
LIQUIDTAD_USE_NUMBA, since the selection happens at import time.
"""
import argparse
import csv
import json
import os
import subprocess
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from liquidtad import kernels as K


def median_ms(fn, iters, warmup=3):
    for _ in range(warmup):
        fn()
    lat = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        fn()
        lat.append((time.perf_counter_ns() - t0) / 1e6)
    return float(np.median(lat))


def kernel_cases(T, C, dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(T, C)).astype(dtype)
    g = rng.normal(size=(T, C)).astype(dtype)
    k = rng.normal(size=(3, C)).astype(dtype)
    gamma, beta = np.ones(C, dtype), np.zeros(C, dtype)
    _, xhat, rstd = K.layer_norm_forward_numpy(x, gamma, beta, 1e-5)
    starts = np.sort(rng.uniform(0, 100, 400))
    ends = starts + rng.uniform(0.5, 10, 400)
    return {
        "conv_dw_forward": ((x, k), K.conv_dw_forward_numpy, K.conv_dw_forward_numba),
        "conv_dw_backward": ((g, x, k), K.conv_dw_backward_numpy, K.conv_dw_backward_numba),
        "layer_norm_forward": ((x, gamma, beta, 1e-5), K.layer_norm_forward_numpy, K.layer_norm_forward_numba),
        "layer_norm_backward": ((g, xhat, rstd, gamma), K.layer_norm_backward_numpy, K.layer_norm_backward_numba),
        "maxpool_forward": ((x, 2), K.maxpool_forward_numpy, K.maxpool_forward_numba),
        "all_finite": ((x,), K.all_finite_numpy, K.all_finite_numba),
        "nms_400": ((starts, ends, 0.5), K.nms_numpy, K.nms_numba),
    }


BACKBONE = """
import json, sys, time
import numpy as np
from threadpoolctl import threadpool_limits
from liquidtad import engine as E, kernels
from liquidtad.detector import Detector, PyramidConfig
T, C, iters = map(int, sys.argv[1:4])
m = Detector(PyramidConfig(embed_dim=C, input_dim=C))
x = E.Tensor(np.random.default_rng(0).normal(size=(m.cfg.padded_length(T), C)).astype(np.float32))
with threadpool_limits(limits=1):
    for _ in range(3):
        m.backbone(x)
    lat = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        m.backbone(x)
        lat.append((time.perf_counter_ns() - t0) / 1e6)
print(json.dumps({"path": kernels.backend_name(), "median_ms": float(np.median(lat))}))
"""


def backbone_ms(T, C, iters, use_numba):
    env = dict(os.environ, LIQUIDTAD_USE_NUMBA="1" if use_numba else "0")
    out = subprocess.run([sys.executable, "-c", BACKBONE, str(T), str(C), str(iters)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])["median_ms"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=2304)
    ap.add_argument("--C", type=int, default=64)
    ap.add_argument("--iters", type=int, default=50)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    ap.add_argument("--csv")
    ap.add_argument("--skip-backbone", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        sys.exit("numba is not importable; nothing to compare")

    rows = []
    with threadpool_limits(limits=1):
        for name, (inputs, f_np, f_nb) in kernel_cases(args.T, args.C, np.dtype(args.dtype)).items():
            f_nb(*inputs)   # compile (or load from cache) outside the timing
            t_np = median_ms(lambda: f_np(*inputs), args.iters)
            t_nb = median_ms(lambda: f_nb(*inputs), args.iters)
            rows.append({"kernel": name, "numpy_ms": t_np, "numba_ms": t_nb, "speedup": t_np / t_nb})
    if not args.skip_backbone:
        t_np = backbone_ms(args.T, args.C, max(args.iters // 5, 5), False)
        t_nb = backbone_ms(args.T, args.C, max(args.iters // 5, 5), True)
        rows.append({"kernel": "backbone (stem + pyramid)", "numpy_ms": t_np, "numba_ms": t_nb,
                     "speedup": t_np / t_nb})

    print(f"T={args.T} C={args.C} {args.dtype}, single thread, median of {args.iters}")
    print(f"{'kernel':<28s}{'numpy ms':>12s}{'numba ms':>12s}{'speedup':>10s}")
    for r in rows:
        print(f"{r['kernel']:<28s}{r['numpy_ms']:12.4f}{r['numba_ms']:12.4f}{r['speedup']:9.2f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
