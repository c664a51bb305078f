"""Backend selection for the hot kernels.

Set ``LIPFORGE_BACKEND=numpy`` to force the pure-numpy path; the default is
``numba`` when numba imports cleanly. ``LIPFORGE_THREADS`` caps worker count.
"""

import contextlib
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _initial_backend():
    name = os.environ.get("LIPFORGE_BACKEND", "").strip().lower()
    if name in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"LIPFORGE_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ImportError("LIPFORGE_BACKEND=numba but numba is not importable")
    return name


_backend = _initial_backend()


def backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ImportError("numba is not importable")
    _backend = name


@contextlib.contextmanager
def use_backend(name):
    old = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(old)


def thread_cap():
    raw = os.environ.get("LIPFORGE_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    n = int(raw)
    if n < 1:
        raise ValueError("LIPFORGE_THREADS must be >= 1")
    return n


def njit(*args, **kwargs):
    """``numba.njit`` with caching and nogil on, or an identity decorator without numba."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda fn: fn

