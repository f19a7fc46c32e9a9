"""Backend selection for the hot kernels.

Kernels exist twice: a numba ``@njit`` loop and a pure-numpy version.
``CVAE_DISABLE_NUMBA=1`` in the environment selects numpy at import time;
``use_backend`` switches temporarily (the benchmark uses it).
"""

import contextlib
import functools
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
_DISABLED = os.environ.get("CVAE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

_backend = "numba" if HAVE_NUMBA and not _DISABLED else "numpy"


def backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable in this environment")
    _backend = name


@contextlib.contextmanager
def use_backend(name):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def njit(fn):
    """Lazily compiled ``numba.njit``; the plain function when numba is absent."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def dispatch(numba_impl, numpy_impl):
    """Route calls to one of two implementations based on the active backend."""

    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            if _backend == "numba":
                return numba_impl(*args, **kwargs)
            return numpy_impl(*args, **kwargs)

        wrapper.numba_impl = numba_impl
        wrapper.numpy_impl = numpy_impl
        return wrapper

    return decorator
