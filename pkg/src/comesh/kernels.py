"""Kernel dispatch: compiled extension when importable, pure Python otherwise.

Set ``COMESH_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _purepy

BACKEND = "python"

if os.environ.get("COMESH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _speedups as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _purepy
else:
    _impl = _purepy

all_pairs_hops = _impl.all_pairs_hops
lsh_keys = _impl.lsh_keys
mc_availability = _impl.mc_availability

__all__ = ["BACKEND", "all_pairs_hops", "lsh_keys", "mc_availability"]
