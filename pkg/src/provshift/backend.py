"""Numba backend selection.

Hot numeric kernels are compiled with numba when it is importable and the
environment variable ``PROVSHIFT_NUMBA`` is not set to ``0``. Otherwise the
same functions run as plain numpy, so results are available (more slowly)
everywhere. ``benchmarks/bench_kernels.py`` compares the two paths.
"""

import os

NUMBA_ENABLED = os.environ.get("PROVSHIFT_NUMBA", "1") != "0"

if NUMBA_ENABLED:
    try:
        from numba import njit
    except ImportError:
        NUMBA_ENABLED = False

if not NUMBA_ENABLED:
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def backend_name():
    return "numba" if NUMBA_ENABLED else "numpy"
