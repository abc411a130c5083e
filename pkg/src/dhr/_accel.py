"""Kernel backend selection.

Hot loops are written twice: a numba ``@njit`` kernel and a pure-numpy
fallback.  Set ``DHR_DISABLE_NUMBA=1`` to force the numpy path (or when numba
is not importable).
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

DISABLED = os.environ.get("DHR_DISABLE_NUMBA", "").strip() not in ("", "0")
HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not DISABLED


def njit(fn):
    """Compile ``fn`` with numba when available, else return ``None``.

    Callers keep the undecorated function as the reference implementation.
    """
    if not HAVE_NUMBA:
        return None
    return numba.njit(cache=True, nogil=True)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
