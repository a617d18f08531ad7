"""Optional numba acceleration for the numeric hot loops.

The two hot paths in this package -- the fixed-step RK4 integrator in
``dynamics`` and the small-MLP forward/backward kernels in ``approx`` --
are written once in plain numpy-compatible style and compiled with
``numba.njit`` when available.  Set the environment variable
``GR2_NUMBA=0`` (or ``off`` / ``false``) before import to force the pure
numpy/python fallback; ``benchmarks/bench_kernels.py`` times both paths.
"""

from __future__ import annotations

import os

_flag = os.environ.get("GR2_NUMBA", "1").strip().lower()
_WANT_NUMBA = _flag not in ("0", "off", "false", "no")

if _WANT_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        numba = None
else:
    numba = None

NUMBA_ENABLED = numba is not None


def maybe_njit(func):
    """Apply ``numba.njit`` when enabled, otherwise return ``func`` as-is.

    ``cache=True`` keeps recompilation out of repeated CLI invocations;
    fastmath stays off so both paths follow the same IEEE semantics.
    """
    if NUMBA_ENABLED:
        return numba.njit(cache=True, fastmath=False)(func)
    return func
