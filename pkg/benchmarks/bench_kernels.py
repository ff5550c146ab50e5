"""Time the compiled and numpy kernel backends on tracker-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--end-to-end]

Inputs match one tracked frame: an 8x16x16 search map, ten proposals plus
250 training boxes, a 5x5 correlation kernel and a 256x256 crop.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cascadetrack import kernels


def cases(rng):
    data = rng.uniform(-1, 1, (8, 16, 16)).astype(np.float32)
    xy = rng.uniform(0, 12, (260, 2))
    wh = rng.uniform(1, 6, (260, 2))
    rois = np.column_stack([xy, xy + wh])
    boxes = np.column_stack([rng.uniform(0, 200, (400, 2)), rng.uniform(0, 200, (400, 2)) + 20])
    boxes[:, 2:] = np.maximum(boxes[:, 2:], boxes[:, :2] + 1)
    order = np.argsort(-rng.uniform(0, 1, 400)).astype(np.int64)
    tmpl = data[:, 5:10, 5:10].copy()
    img = rng.uniform(0, 1, (1, 360, 480)).astype(np.float32)
    ys, xs = np.linspace(10, 330, 256), np.linspace(20, 450, 256)
    return {
        "roialign 260 boxes 6x6": lambda b: b.roialign(data, rois, 6, 2),
        "pyramid levels 3x3+1x1": lambda b: (b.roialign(data, rois, 3, 2), b.roialign(data, rois, 1, 2)),
        "ncc 5x5 over 16x16": lambda b: b.ncc(tmpl, data),
        "nms 400 boxes keep 10": lambda b: b.nms(boxes, order, 0.6, 10),
        "crop 256x256 bilinear": lambda b: b.sample_grid(img, ys, xs, np.zeros(1)),
    }


def end_to_end(pure: bool) -> float:
    """Seconds to track one 100-frame sequence, run in a fresh interpreter."""
    env = dict(os.environ, CASCADETRACK_PURE_PYTHON="1" if pure else "0")
    code = (
        "import time;from cascadetrack.synth import standard_spec,gen_sequence;"
        "from cascadetrack.tracker import track_sequence;"
        "f,g=gen_sequence(standard_spec(1,'none'));t=time.perf_counter();"
        "track_sequence(f,g[0]);print(time.perf_counter()-t)"
    )
    out = subprocess.run([sys.executable, "-c", code], env=env, check=True, capture_output=True, text=True)
    return float(out.stdout.strip())


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true", help="also time a full sequence per backend")
    args = ap.parse_args()
    backs = kernels.available_backends()
    if "cython" not in backs:
        print("compiled extension not built; only the numpy backend is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s}" + "".join(f"{n:>12s}" for n in backs) + ("     speedup" if len(backs) > 1 else ""))
    for name, fn in cases(rng).items():
        times = {}
        for bname, mod in backs.items():
            fn(mod)  # warm up
            times[bname] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
        row = f"{name:28s}" + "".join(f"{times[b]:10.3f}ms" for b in backs)
        if len(backs) > 1:
            row += f"{times['python'] / times['cython']:11.1f}x"
        print(row)
    if args.end_to_end:
        for pure in ([False, True] if len(backs) > 1 else [True]):
            print(f"100-frame sequence, {'numpy' if pure else 'cython'} kernels: {end_to_end(pure):.2f}s")


if __name__ == "__main__":
    main()
