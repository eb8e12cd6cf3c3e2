"""Numba switch.

Set ``COMMA_DDPG_NO_JIT=1`` to run every kernel through its pure numpy /
interpreted path. Useful for debugging and for the benchmark comparison.
"""
import os

_flag = os.environ.get("COMMA_DDPG_NO_JIT", "").strip().lower()

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_JIT = HAVE_NUMBA and _flag not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when JIT is enabled, identity otherwise."""
    if USE_JIT:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
