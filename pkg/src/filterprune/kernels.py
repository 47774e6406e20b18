"""Kernel dispatch: compiled extension if importable, numpy fallback otherwise.

Set ``FILTERPRUNE_BACKEND=python`` to force the fallback, or ``=cython`` to
fail loudly when the extension is missing.
"""
import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)

_requested = os.environ.get("FILTERPRUNE_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _requested == "cython":
            raise
        logger.debug("compiled kernels unavailable, using numpy fallback")
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

l1_scores = _impl.l1_scores
fpgm_scores = _impl.fpgm_scores
pairwise_distances = _impl.pairwise_distances
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward


def available_backends():
    """Return the names of the kernel modules that can be imported here."""
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


def get_backend(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
