"""numba detection and the numpy-fallback switch.

Set ``SATCALC_NO_NUMBA=1`` to force every kernel onto its pure-numpy path.
"""
import os


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


def _flag_disabled():
    return os.environ.get("SATCALC_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


def _have_numba():
    try:
        import numba  # noqa: F401

        return True
    except ImportError:
        return False


HAVE_NUMBA = _have_numba()
USE_NUMBA = HAVE_NUMBA and not _flag_disabled()

if HAVE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit


def backend():
    """Name of the kernel backend selected at import time."""
    return "numba" if USE_NUMBA else "numpy"
