"""Select the propagation kernel implementation at import time.

The compiled extension is preferred.  Set ``COLLAPSAR_BACKEND=python`` to
force the numpy fallback.
"""
import os

from . import _pykernels

python = _pykernels

try:
    from . import _ckernels as compiled
except ImportError:  # extension not built
    compiled = None

if os.environ.get("COLLAPSAR_BACKEND", "").lower() == "python" or compiled is None:
    kernels = _pykernels
    NAME = "python"
else:
    kernels = compiled
    NAME = "cython"


def get(name=None):
    """Return the kernel module called ``name`` (``"cython"``/``"python"``), default active."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        if compiled is None:
            raise ImportError("compiled kernels are not available")
        return compiled
    raise ValueError(f"unknown backend {name!r}")
