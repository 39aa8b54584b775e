"""Kernel lane selection.

Imports the compiled convolution kernels when the extension was built,
otherwise the numpy fallback. `AFTL_PURE_PYTHON=1` forces the fallback
(useful for the lane-comparison benchmark and for debugging).
"""

import os

if os.environ.get("AFTL_PURE_PYTHON"):
    from . import pykernels as _impl
else:
    try:
        from . import _native as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import pykernels as _impl

BACKEND = _impl.BACKEND
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
output_hw = _impl.output_hw

__all__ = ["BACKEND", "conv2d_forward", "conv2d_backward", "output_hw"]
