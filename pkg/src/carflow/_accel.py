"""Backend switch for the hot kernels.

Set ``CARFLOW_NUMBA=0`` before import to force the pure-numpy path; numba is
also skipped silently when it is not installed.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("CARFLOW_NUMBA", "1").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        # numpy semantics for float division: no ZeroDivisionError checks, which block SIMD
        kwargs.setdefault("error_model", "numpy")
        return _numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f
