"""Numba switch for the hot loops.

Every kernel in the package exists twice: a ``@njit`` loop and a plain
numpy/Python path. ``BNMEM_NUMBA=0`` in the environment selects the plain
path at import time; anything else (or unset) uses numba when importable.
Both paths are kept bit-compatible where the arithmetic allows it.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _env_enabled():
    flag = os.environ.get("BNMEM_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


NUMBA_ENABLED = numba is not None and _env_enabled()


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def pick(fast, slow):
    """Return the numba kernel or its fallback according to the env flag."""
    return fast if NUMBA_ENABLED else slow
