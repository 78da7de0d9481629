"""Backend selection for the pooling/convolution kernels.

The compiled extension is used when it imported cleanly; otherwise the numpy
fallback is used. Set ``ROBUSTEVAL_PURE=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ROBUSTEVAL_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

maxpool_forward = _impl.maxpool_forward
maxpool_backward_exact = _impl.maxpool_backward_exact
maxpool_backward_soft = _impl.maxpool_backward_soft
im2col = _impl.im2col
col2im = _impl.col2im

__all__ = [
    "BACKEND",
    "maxpool_forward",
    "maxpool_backward_exact",
    "maxpool_backward_soft",
    "im2col",
    "col2im",
]
