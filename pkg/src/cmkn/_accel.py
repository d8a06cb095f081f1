"""Backend selection for the hot numeric kernels.

Set ``CMKN_DISABLE_NUMBA=1`` to force the pure-numpy code path. The flag is
read once at import time; :func:`set_backend` switches at runtime (used by the
test-suite and the benchmark to compare both paths in one process).
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_FALSY = {"", "0", "false", "no", "off"}


def _env_disabled():
    return os.environ.get("CMKN_DISABLE_NUMBA", "").strip().lower() not in _FALSY


_use_numba = HAVE_NUMBA and not _env_disabled()


def use_numba():
    return _use_numba


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend name."""
    global _use_numba
    previous = backend()
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


def backend():
    return "numba" if _use_numba else "numpy"


def njit(func):
    """``numba.njit`` with the project defaults, or identity without numba."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True, fastmath=False)(func)
