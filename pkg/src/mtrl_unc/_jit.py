"""Optional numba acceleration.

Kernels are written in the numpy subset that numba understands. When numba is
importable and ``MTRL_UNC_NO_NUMBA`` is unset (or "0"), they are compiled with
``numba.njit``; otherwise the identical Python source runs as plain numpy.
"""

import os

_disabled = os.environ.get("MTRL_UNC_NO_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    import numba as _numba
    HAVE_NUMBA = True
except ImportError:
    _numba = None
    HAVE_NUMBA = False


def njit(func):
    """Compile ``func`` with numba when enabled; always keep the Python version on ``.py_func``."""
    if HAVE_NUMBA:
        compiled = _numba.njit(cache=True)(func)
        return compiled
    func.py_func = func
    return func


def backend():
    return "numba" if HAVE_NUMBA else "numpy"
