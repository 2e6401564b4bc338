"""Kernel backend selection.

Hot kernels are written twice: a numba ``@njit`` version and a pure-numpy
version.  The numba path is used when numba imports cleanly and the
environment variable ``UWMMSE_DISABLE_NUMBA`` is unset (or ``0``).  Both
paths are kept numerically interchangeable and the test suite runs them
side by side.
"""

import os
from contextlib import contextmanager

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "UWMMSE_DISABLE_NUMBA"

_use_numba = HAVE_NUMBA and os.environ.get(ENV_FLAG, "0").lower() in ("", "0", "false", "no")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return numba.njit(*args, **kwargs)

    def wrap(func):
        return func

    if len(args) == 1 and callable(args[0]):
        return args[0]
    return wrap


def use_numba() -> bool:
    return _use_numba


def backend_name() -> str:
    return "numba" if _use_numba else "numpy"


def set_backend(name: str) -> None:
    global _use_numba
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r} (expected 'numba' or 'numpy')")


@contextmanager
def backend(name: str):
    """Temporarily switch the kernel backend."""
    previous = backend_name()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)
