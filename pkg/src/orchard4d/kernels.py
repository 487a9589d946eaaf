"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``ORCHARD4D_PURE_PYTHON=1`` to force the fallback (used by the benchmark
and the kernel-parity tests).
"""

from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"

if os.environ.get("ORCHARD4D_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

solve_lsa = _impl.solve_lsa
rle_intersection = _impl.rle_intersection

__all__ = ["BACKEND", "solve_lsa", "rle_intersection"]
