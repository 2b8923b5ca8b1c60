"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Setting ``WEST_PURE_PYTHON=1`` forces the fallback.
"""

import os

from west import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("WEST_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from west import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

segment_overlap_batch = _impl.segment_overlap_batch
overlap_matrix_sum = _impl.overlap_matrix_sum
locate_points = _impl.locate_points


def backends():
    """Map of backend name to kernel module for every backend that imports."""
    found = {"python": _pykernels}
    try:
        from west import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
