"""Numba switch.

Set ``FLEXSIM_DISABLE_NUMBA=1`` to run every kernel on its pure-numpy path.
"""
import os

_DISABLED = os.environ.get("FLEXSIM_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag in CI
    _njit = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, otherwise ``None``.

    Callers pick between the jitted kernel and their numpy formulation, so a
    disabled build never runs a silently-interpreted loop.
    """
    if not HAVE_NUMBA:
        def deco(fn):
            return None
        return deco
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)
