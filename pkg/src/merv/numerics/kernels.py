"""Kernel backend selection.

The compiled extension is used when it was built and ``MERV_PURE_PYTHON`` is
unset; otherwise the numpy versions are loaded. Both expose the same three
functions: ``pool_forward``, ``pool_backward`` and ``conv3d_into``.
"""
import os

from . import _kernels_py as fallback

compiled = None
if not os.environ.get("MERV_PURE_PYTHON"):
    try:
        from . import _kernels as compiled
    except ImportError:
        compiled = None

BACKEND = "cython" if compiled is not None else "numpy"
active = compiled if compiled is not None else fallback


def backends():
    """Map backend name to module for every backend importable in this process."""
    found = {"numpy": fallback}
    if compiled is not None:
        found["cython"] = compiled
    return found
