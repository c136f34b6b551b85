"""Hot-loop kernels, compiled when available.

The Cython extension ``modiqa._kernels`` is used if it was built; otherwise
the numpy versions in ``modiqa._kernels_py`` are used. Set
``MODIQA_PURE_PYTHON=1`` to force the fallback.
"""

import os

from modiqa import _kernels_py

if os.environ.get("MODIQA_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from modiqa import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

kendall_counts = _impl.kendall_counts
box_mean = _impl.box_mean
pairwise_rank = _impl.pairwise_rank

__all__ = ["BACKEND", "kendall_counts", "box_mean", "pairwise_rank"]
