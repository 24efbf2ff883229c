"""Kernel dispatch: use the compiled extension when it imports, else numpy.

Set ``SESLEASE_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("SESLEASE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

distflow_sweep = _impl.distflow_sweep
merit_order_fill = _impl.merit_order_fill
