"""Backend switch for the compiled kernels.

Set ``FEDLMM_NUMBA=0`` before import to force the pure-numpy path.  The numba
path is also skipped silently when numba is not importable.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("FEDLMM_NUMBA", "1").strip().lower()

try:  # pragma: no cover - depends on the environment
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in {"0", "false", "no", "off"}

NUMBA_OPTS = {"cache": True, "nogil": True}


def njit(func):
    """``numba.njit`` with package-wide options; identity when numba is absent."""
    if not HAVE_NUMBA:
        return func
    import numba

    return numba.njit(**NUMBA_OPTS)(func)
