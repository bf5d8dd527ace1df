"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``FLATCOMP_PURE_PYTHON=1`` to force the fallback before import.
"""

from __future__ import annotations

import os

from . import _kernels_py as fallback

compiled = None
if not os.environ.get("FLATCOMP_PURE_PYTHON"):
    try:
        from . import _kernels as compiled  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled = None

_active = compiled if compiled is not None else fallback

BACKEND: str = _active.BACKEND
adam_update = _active.adam_update
qgemm = _active.qgemm

__all__ = ["BACKEND", "adam_update", "qgemm", "compiled", "fallback"]
