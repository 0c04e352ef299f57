"""Backend selection for the numeric kernels.

Set ``EPICOORD_DISABLE_NUMBA=1`` to force the pure-numpy code paths, e.g. on
platforms without llvmlite or when debugging a kernel.
"""
import os

ENV_FLAG = "EPICOORD_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False


def numba_requested():
    value = os.environ.get(ENV_FLAG, "").strip().lower()
    return value not in ("1", "true", "yes", "on")


def njit(func):
    """Compile ``func`` in nopython mode if numba is importable.

    Without numba the function is returned untouched, so loop kernels still
    run (slowly) as plain Python.
    """
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True)(func)


def default_backend():
    return "numba" if HAVE_NUMBA and numba_requested() else "numpy"
