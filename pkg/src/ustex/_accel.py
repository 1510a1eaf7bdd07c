"""Selects the numba or pure-numpy kernel implementations.

Set ``USTEX_DISABLE_NUMBA=1`` to force the numpy fallback, e.g. when
debugging or on platforms without a working LLVM.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}


def numba_disabled() -> bool:
    return os.environ.get("USTEX_DISABLE_NUMBA", "").strip().lower() not in _FALSY


def _have_numba() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


HAVE_NUMBA = _have_numba()
USE_NUMBA = HAVE_NUMBA and not numba_disabled()
