"""Numba switch.

Hot kernels are written once as plain Python loops and compiled with
``numba.njit`` unless ``LIDARSEQ_NO_NUMBA=1`` is set (or numba is missing),
in which case callers use the vectorised numpy path instead.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("LIDARSEQ_NO_NUMBA", "0") not in ("1", "true", "yes")


def njit(fn):
    """Compile ``fn`` with numba when enabled, else return it untouched."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend():
    return "numba" if USE_NUMBA else "numpy"
