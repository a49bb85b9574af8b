"""Backend selection for the compiled kernels.

Set ``COMMTOPO_BACKEND=numpy`` to force the pure-numpy fallback; the default
uses numba when it can be imported.
"""
import os

BACKEND_ENV = "COMMTOPO_BACKEND"

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

NUMBA_AVAILABLE = _numba is not None


def use_numba() -> bool:
    flag = os.environ.get(BACKEND_ENV, "numba").strip().lower()
    return NUMBA_AVAILABLE and flag not in ("numpy", "python", "off", "0")


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or an identity decorator without numba."""
    if not NUMBA_AVAILABLE:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _numba.njit(*args, **kwargs)
