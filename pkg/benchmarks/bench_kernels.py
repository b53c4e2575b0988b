"""Numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each workload runs both backends on identical inputs, checks that they agree,
and reports the best-of-N wall time. ``--processes`` additionally times a
toy-model forward/backward in two fresh interpreters, one with
``SF2F_DISABLE_NUMBA=1``, so that the global switch is exercised as users see it.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from sf2former import _accel
from sf2former.data.augment import MAX_ANGLE

WORKLOADS = {}


def workload(name):
    def deco(fn):
        WORKLOADS[name] = fn
        return fn
    return deco


@workload("fft rows 512x16 (token-grid columns, toy width)")
def _fft_small(rng):
    x = rng.standard_normal((512, 16)) + 1j * rng.standard_normal((512, 16))
    return lambda backend: _fft(x, backend)


@workload("fft rows 14336x32 (Bluestein pass, full-scale grid)")
def _fft_large(rng):
    # a 14-point transform runs as 32-point convolutions over 14 * 512 * 2 rows
    x = rng.standard_normal((14336, 32)) + 1j * rng.standard_normal((14336, 32))
    return lambda backend: _fft(x, backend)


@workload("bilinear resize 15 slices 218x182 -> 224x224")
def _resize(rng):
    img = rng.random((15, 218, 182))
    rows = np.broadcast_to(((np.arange(224) + 0.5) * 218 / 224 - 0.5)[:, None], (224, 224)).copy()
    cols = np.broadcast_to(((np.arange(224) + 0.5) * 182 / 224 - 0.5)[None, :], (224, 224)).copy()
    return lambda backend: _accel.bilinear_sample(img, rows, cols, backend)


@workload("bilinear rotation 16 slices 32x32")
def _rotate(rng):
    img = rng.random((16, 32, 32))
    theta = np.deg2rad(MAX_ANGLE)
    r, c = np.meshgrid(np.arange(32) - 15.5, np.arange(32) - 15.5, indexing="ij")
    rows = np.cos(theta) * r - np.sin(theta) * c + 15.5
    cols = np.sin(theta) * r + np.cos(theta) * c + 15.5
    return lambda backend: _accel.bilinear_sample(img, rows, cols, backend)


def _fft(x, backend):
    y = x.copy()
    _accel.fft_rows(y, backend)
    return y


def bench(repeat: int) -> list[dict]:
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is unavailable (or SF2F_DISABLE_NUMBA is set); nothing to compare")
    rows = []
    for name, make in WORKLOADS.items():
        fn = make(np.random.default_rng(0))
        fn("numba")  # compile outside the timing
        diff = float(np.abs(fn("numba") - fn("numpy")).max())
        times = {b: min(timeit.repeat(lambda b=b: fn(b), number=1, repeat=repeat)) for b in ("numba", "numpy")}
        rows.append({"workload": name, "numba_s": times["numba"], "numpy_s": times["numpy"],
                     "speedup": times["numpy"] / times["numba"], "max_abs_diff": diff})
    return rows


PROCESS_SNIPPET = """
import time, numpy as np
from sf2former import _accel
from sf2former.model import SF2FormerModel, toy_config, fuse_forward
from sf2former.nn import cross_entropy
from sf2former.tensor import Graph
m = SF2FormerModel(toy_config(), seed=0)
x = np.random.default_rng(0).random((16, 32, 32)).astype(np.float32)
def step():
    with Graph() as g:
        loss = cross_entropy(fuse_forward(m, x), [0, 1] * 8)
    g.backward(loss, m.parameters())
step()
ts = []
for _ in range(5):
    t = time.perf_counter(); step(); ts.append(time.perf_counter() - t)
print(_accel.BACKEND, min(ts))
"""


def bench_processes() -> list[dict]:
    out = []
    for flag in ("0", "1"):
        env = {**os.environ, "SF2F_DISABLE_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", PROCESS_SNIPPET], env=env, capture_output=True, text=True,
                             check=True)
        backend, secs = res.stdout.split()
        out.append({"backend": backend, "toy_train_step_s": float(secs)})
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--processes", action="store_true", help="also time a toy training step per backend")
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)
    rows = bench(args.repeat)
    width = max(len(r["workload"]) for r in rows)
    print(f"{'workload':<{width}}  {'numba ms':>9}  {'numpy ms':>9}  {'speedup':>7}  max |diff|")
    for r in rows:
        print(f"{r['workload']:<{width}}  {1e3 * r['numba_s']:9.3f}  {1e3 * r['numpy_s']:9.3f}  "
              f"{r['speedup']:6.1f}x  {r['max_abs_diff']:.1e}")
    result = {"kernels": rows}
    if args.processes:
        result["processes"] = bench_processes()
        for r in result["processes"]:
            print(f"toy train step ({r['backend']}): {1e3 * r['toy_train_step_s']:.1f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
