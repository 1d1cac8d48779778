"""Convolution inner-loop kernels, compiled when available.

``BACKEND`` reports which implementation was selected at import time:
"cython" when the compiled extension is importable, "numpy" otherwise.
Both expose the same ``im2col`` / ``col2im`` signatures over float64 arrays.
"""
try:
    from ._ckernels import col2im, im2col

    BACKEND = "cython"
except ImportError:  # pragma: no cover - depends on how the package was built
    from ._npkernels import col2im, im2col

    BACKEND = "numpy"

from . import _npkernels

__all__ = ["im2col", "col2im", "BACKEND", "_npkernels"]
