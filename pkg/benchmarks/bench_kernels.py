"""Compiled kernels vs the numpy fallback.

Times the two hot kernels directly on both backends, then one full
single-session localization under each backend (in a subprocess, since the
backend is picked at import time via ``ORCHARD4D_PURE_PYTHON``).

    python benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np
from scipy.optimize import linear_sum_assignment as scipy_lsa

from orchard4d import _fallback
from orchard4d.core import Mask

try:
    from orchard4d import _kernels
except ImportError:
    _kernels = None

LOCALIZE = """
import time
from orchard4d import kernels
from orchard4d.pipeline import localize
from orchard4d.simulator import OrchardSpec, SessionSpec, simulate
_, sessions, _ = simulate(OrchardSpec(seed=0, n_trees=4, sessions=(SessionSpec("a"),)))
t = time.perf_counter()
n = len(localize(sessions[0]).session.landmarks)
print(kernels.BACKEND, n, time.perf_counter() - t)
"""


def best_of(fn, repeat: int, number: int) -> float:
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def disk(frame, cx, cy, r):
    rows, cols = np.mgrid[cy - r : cy + r + 1, cx - r : cx + r + 1]
    keep = (rows - cy) ** 2 + (cols - cx) ** 2 <= r * r
    return Mask.from_pixels(frame, rows[keep], cols[keep]).runs


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'python':>12}{'cython':>12}{'speedup':>10}{'scipy':>12}")
    for m, n in [(7, 7), (30, 60), (100, 200), (300, 600)]:
        c = rng.random((m, n))
        number = max(1, 2000 // (m * n) * 10)
        tp = best_of(lambda: _fallback.solve_lsa(c), args.repeat, number)
        tc = best_of(lambda: _kernels.solve_lsa(c), args.repeat, number)
        ts = best_of(lambda: scipy_lsa(c), args.repeat, number)
        print(f"{f'solve_lsa {m}x{n}':<28}{tp * 1e3:>10.3f}ms{tc * 1e3:>10.3f}ms{tp / tc:>9.1f}x{ts * 1e3:>10.3f}ms")

    for r in (5, 20, 60):
        a, b = disk(0, 200, 200, r), disk(0, 200 + r, 200, r)
        tp = best_of(lambda: _fallback.rle_intersection(a, b), args.repeat, 500)
        tc = best_of(lambda: _kernels.rle_intersection(a, b), args.repeat, 500)
        print(f"{f'rle_intersection r={r}px':<28}{tp * 1e6:>10.2f}us{tc * 1e6:>10.2f}us{tp / tc:>9.1f}x")

    print()
    for pure in ("1", "0"):
        env = dict(os.environ, ORCHARD4D_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", LOCALIZE], env=env, capture_output=True, text=True, check=True)
        backend, n, secs = out.stdout.split()
        print(f"localize 4 trees ({backend:>6}): {n} landmarks in {float(secs):.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
