"""Compare the compiled kernel core against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--sizes 100000,1000000]

Times the hot kernels (mod-p elementwise ops, dot/matvec, dealer stream
generation, the quantized-DCT rescale matmul) and one end-to-end defense
proof on each backend. The fallback is selected by re-importing with
ZKSPLIT_FORCE_FALLBACK=1 in a subprocess so extension state never leaks.
"""

import argparse
import json
import os
import subprocess
import sys
import time

WORKER = """
import json, os, time
import numpy as np
import zksplit._kernels as K

sizes = json.loads(os.environ["BENCH_SIZES"])
out = {"backend": K.BACKEND, "results": {}}
rng = np.random.default_rng(1)

for n in sizes:
    a = rng.integers(0, K.P, n, dtype=np.uint64)
    b = rng.integers(0, K.P, n, dtype=np.uint64)
    reps = max(1, 2_000_000 // n)
    t0 = time.perf_counter()
    for _ in range(reps):
        K.mulmod(a, b)
    out["results"][f"mulmod/{n}"] = (time.perf_counter() - t0) / reps
    t0 = time.perf_counter()
    for _ in range(reps):
        K.dot_mod(a, b)
    out["results"][f"dot_mod/{n}"] = (time.perf_counter() - t0) / reps
    t0 = time.perf_counter()
    for _ in range(reps):
        K.uniform_mod(7, 0, n)
    out["results"][f"dealer_stream/{n}"] = (time.perf_counter() - t0) / reps

side = 128
cq = rng.integers(-2**17, 2**17, (side, side)).astype(np.int64)
m = rng.integers(-2**39, 2**39, (side, side)).astype(np.int64)
t0 = time.perf_counter()
for _ in range(5):
    K.rescale_matmul(cq, m, 16)
out["results"][f"rescale_matmul/{side}x{side}"] = (time.perf_counter() - t0) / 5

from zksplit import scaling
t0 = time.perf_counter()
row = scaling.measure_proof_cost(10_000, seed=1)
out["results"]["defense_proof/10k_params"] = time.perf_counter() - t0
out["proof_bytes_10k"] = row["bytes"]
print(json.dumps(out))
"""


def run_backend(force_fallback, sizes):
    env = dict(os.environ, BENCH_SIZES=json.dumps(sizes))
    if force_fallback:
        env["ZKSPLIT_FORCE_FALLBACK"] = "1"
    else:
        env.pop("ZKSPLIT_FORCE_FALLBACK", None)
    proc = subprocess.run([sys.executable, "-c", WORKER], env=env,
                          capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(proc.stderr)
    return json.loads(proc.stdout)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--sizes", default="100000,1000000")
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    compiled = run_backend(False, sizes)
    fallback = run_backend(True, sizes)
    if compiled["backend"] != "compiled":
        print("note: compiled extension unavailable; both columns are the fallback")

    keys = list(compiled["results"])
    width = max(len(k) for k in keys)
    print(f"{'kernel':<{width}}  {'compiled':>12}  {'fallback':>12}  {'speedup':>8}")
    for key in keys:
        c = compiled["results"][key]
        f = fallback["results"][key]
        print(f"{key:<{width}}  {c * 1e3:>10.2f}ms  {f * 1e3:>10.2f}ms  {f / c:>7.1f}x")


if __name__ == "__main__":
    main()
