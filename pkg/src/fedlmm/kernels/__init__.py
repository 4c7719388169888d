"""Hot numeric kernels with a numba path and a pure-numpy path.

The active implementation is chosen once at import from ``FEDLMM_NUMBA``
(see :mod:`fedlmm._accel`).  Both implementations stay importable as
:data:`numba_impl` and :data:`numpy_impl` for cross-checking and benchmarks.
"""

from __future__ import annotations

from .._accel import HAVE_NUMBA, USE_NUMBA
from . import _numpy as numpy_impl

if HAVE_NUMBA:
    from . import _numba as numba_impl
else:  # pragma: no cover
    numba_impl = None

_active = numba_impl if USE_NUMBA else numpy_impl

BACKEND = "numba" if USE_NUMBA else "numpy"

cholesky_lower = _active.cholesky_lower
central_moment3 = _active.central_moment3
central_moment4 = _active.central_moment4
lmm_terms = _active.lmm_terms

__all__ = [
    "BACKEND",
    "central_moment3",
    "central_moment4",
    "cholesky_lower",
    "lmm_terms",
    "numba_impl",
    "numpy_impl",
]
