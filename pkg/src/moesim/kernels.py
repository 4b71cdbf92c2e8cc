"""Backend selection for the routing kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``MOESIM_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("MOESIM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

topk_indices = _impl.topk_indices
topk_rows = _impl.topk_rows
route_counts = _impl.route_counts
topk_overlap = _impl.topk_overlap

__all__ = ["BACKEND", "topk_indices", "topk_rows", "route_counts", "topk_overlap"]
