"""Two-branch spatial-context-aware multi-label image classifier.

Built from scratch: a minimal reverse-mode autodiff core, anchor-based
object proposals, a context branch with patch expansion, element-wise
classifier fusion, a synthetic multi-label scene dataset, and a full
mAP / macro / micro evaluation suite.
"""
from .kernels import BACKEND as KERNEL_BACKEND

__all__ = ["KERNEL_BACKEND"]
__version__ = "0.1.0"
